//! Times forward and backward passes of the training objective.

use std::time::Instant;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use relnet::dynamics::{generate_dataset, Boundary, SystemSpec};
use relnet::model::{elbo_loss, Batch, ModelConfig, ModelParams};
use relnet::rng::{stream, Purpose};
use relnet::tensor::Tape;

fn main() -> relnet::Result<()> {
    let frames: usize = std::env::args().nth(1).map_or(99, |s| s.parse().unwrap());
    let input: usize = std::env::args().nth(2).map_or(49, |s| s.parse().unwrap());
    let spec = SystemSpec::springs(5, vec![0.5, 0.5], vec![0.0, 1.0], frames, Boundary::Unbounded);
    let t = Instant::now();
    let d = generate_dataset(&spec, 32, 1)?;
    println!("simulate 32: {:?}", t.elapsed());
    let params = ModelParams::<f32>::init(ModelConfig::new(5, 4, 2, input), 0)?;
    let idx: Vec<usize> = (0..32).collect();
    let batch = Batch::from_dataset(&d, &idx);
    for rep in 0..4 {
        let t = Instant::now();
        let tape = Tape::new();
        let b = params.bind(&tape, true);
        let mut rng = stream(0, Purpose::Gumbel, &[rep]);
        let terms = elbo_loss(&b, &batch, &mut rng)?;
        let fwd = t.elapsed();
        let _g = tape.backward(terms.loss)?;
        println!(
            "nodes {} loss {:.3e} forward {:?} total {:?}",
            tape.len(),
            terms.loss.item(),
            fwd,
            t.elapsed()
        );
    }
    Ok(())
}
