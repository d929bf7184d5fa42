//! Finite-difference check of the full training loss gradient for every
//! setting, on a model small enough to perturb coordinate by coordinate.
//!
//! ```text
//! cargo run --release --example gradient_check
//! ```

use glsd::augment::{child_rng, make_views};
use glsd::data::{synthesize, SynthConfig};
use glsd::model::Params;
use glsd::numerics::gradcheck::{check_coords, max_rel_error};
use glsd::numerics::{Tape, Tensor};
use glsd::trainer::{init_state, step_graph, TrainConfig};
use rand::Rng;

const TINY: [&str; 10] = [
    "patch=4",
    "dim=8",
    "depth=1",
    "mlp_hidden=16",
    "head_hidden=16",
    "head_bottleneck=8",
    "prototypes=16",
    "global_size=16",
    "local_size=8",
    "n_local_crops=2",
];

fn main() -> glsd::Result<()> {
    let set = synthesize(&SynthConfig {
        n_images: 2,
        n_classes: 2,
        size: 16,
        seed: 1,
    })?;
    for setting in ["vanilla", "similarity", "geometric"] {
        let mut config = TrainConfig::default();
        for kv in TINY {
            config.apply_override(kv)?;
        }
        config.apply_override(&format!("setting={setting}"))?;
        let crops = config.crops();
        let views = set
            .images
            .iter()
            .enumerate()
            .map(|(i, im)| make_views(im, &crops, i as u64))
            .collect::<glsd::Result<Vec<_>>>()?;
        let mut state = init_state(&config)?;
        // an identical teacher would make the loss flat in some directions
        for t in state.teacher.tensors_mut() {
            for v in t.data_mut() {
                *v *= 1.01;
            }
        }
        let names = state.student.names().to_vec();
        let loss_and_grad = |tensors: &[Tensor]| -> glsd::Result<(f64, Vec<Tensor>)> {
            let mut st = state.clone();
            st.student = Params::from_entries(names.iter().cloned().zip(tensors.iter().cloned()).collect());
            let mut tape = Tape::new();
            let sp = st.student.bind(&mut tape);
            let tp = st.teacher.bind(&mut tape);
            let g = step_graph(&mut tape, &sp, &tp, &st, &views, &config, 0.04)?;
            let loss = tape.value(g.parts.total).item().expect("scalar loss");
            let grads = tape.backward(g.parts.total)?;
            Ok((loss, sp.vars().iter().map(|&v| grads.get_or_zeros(v)).collect()))
        };
        let base = state.student.tensors().to_vec();
        let (loss, analytic) = loss_and_grad(&base)?;
        let mut rng = child_rng(5, 0);
        let coords: Vec<(usize, usize)> = (0..10)
            .map(|_| {
                let t = rng.gen_range(0..base.len());
                (t, rng.gen_range(0..base[t].len()))
            })
            .collect();
        let samples = check_coords(&base, &analytic, &coords, 1e-5, |p| Ok(loss_and_grad(p)?.0))?;
        println!(
            "{setting}: {} parameters, loss {loss:.6}, max relative error {:.2e}",
            state.student.num_scalars(),
            max_rel_error(&samples)
        );
        for s in samples {
            println!(
                "  {:32} [{:>4}] analytic {:+.6e} numeric {:+.6e}",
                names[s.tensor], s.index, s.analytic, s.numeric
            );
        }
    }
    Ok(())
}
