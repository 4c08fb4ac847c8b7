use crossview::data::make_corpus;
use crossview::training::*;
use std::time::Instant;

fn main() {
    for (width, batch) in [(16usize, 16usize), (16, 32), (24, 16), (32, 16)] {
        let corpus = make_corpus::<f32>(8, 32, 3);
        let cfg = TrainConfig {
            batch_size: batch,
            width,
            supervised_epochs: 100,
            max_steps: 6,
            seed: 7,
            ..TrainConfig::default()
        };
        let mut sink = NullSink;
        let mut ctx = TrainCtx::with_sink(&mut sink);
        let t0 = Instant::now();
        let state = train_supervised(&corpus, &cfg, &mut ctx).unwrap();
        let dt = t0.elapsed().as_secs_f64();
        println!(
            "width={width} batch={batch}: {} steps in {:.2}s = {:.3}s/step",
            state.step, dt, dt / state.step as f64
        );
    }
}
