pub mod embed;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use embed::fourier_time_embed;
pub use optim::{adamw_step, clip_global_norm, lr_schedule, AdamWConfig, AdamWState};
pub use params::{init_weight, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::error::Result;
use crate::rng::Rng;

/// Register an MLP `sizes[0] → … → sizes[n]` as `{prefix}.{i}.w` / `.b`.
pub fn register_mlp(
    store: &mut ParamStore,
    prefix: &str,
    sizes: &[usize],
    rng: &mut Rng,
) -> Result<()> {
    for (i, w) in sizes.windows(2).enumerate() {
        store.insert(format!("{prefix}.{i}.w"), init_weight(w[0], w[1], rng))?;
        store.insert(format!("{prefix}.{i}.b"), Tensor::zeros(&[w[1]]))?;
    }
    Ok(())
}

pub fn register_linear(
    store: &mut ParamStore,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    bias: bool,
    rng: &mut Rng,
) -> Result<()> {
    store.insert(format!("{name}.w"), init_weight(fan_in, fan_out, rng))?;
    if bias {
        store.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]))?;
    }
    Ok(())
}

pub fn register_layer_norm(store: &mut ParamStore, name: &str, dim: usize) -> Result<()> {
    store.insert(format!("{name}.gain"), Tensor::vector(vec![1.0; dim]))?;
    store.insert(format!("{name}.shift"), Tensor::zeros(&[dim]))
}

/// `x W (+ b)`.
pub fn linear(tape: &mut Tape, x: Var, name: &str, bias: bool) -> Result<Var> {
    let w = tape.param(&format!("{name}.w"))?;
    let y = tape.matmul(x, w)?;
    if bias {
        let b = tape.param(&format!("{name}.b"))?;
        tape.add_row(y, b)
    } else {
        Ok(y)
    }
}

pub fn layer_norm(tape: &mut Tape, x: Var, name: &str) -> Result<Var> {
    let g = tape.param(&format!("{name}.gain"))?;
    let s = tape.param(&format!("{name}.shift"))?;
    tape.layer_norm(x, g, s)
}

/// Affine layers with GELU between them, none after the last.
pub fn mlp(tape: &mut Tape, x: Var, prefix: &str, layers: usize) -> Result<Var> {
    let mut h = x;
    for i in 0..layers {
        h = linear(tape, h, &format!("{prefix}.{i}"), true)?;
        if i + 1 < layers {
            h = tape.gelu(h);
        }
    }
    Ok(h)
}
