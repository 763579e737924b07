//! Central finite-difference oracle for gradient verification.
//!
//! Test support: the oracle re-evaluates the 32-bit forward pass at
//! perturbed inputs and forms the difference quotient in 64-bit, so it never
//! touches the reverse sweep it is checking. Perturbations are applied in
//! f32 and the quotient uses the actually-realized step, which removes the
//! representation error of `x + h`.

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::Result;
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-3;
pub const DEFAULT_TOL: f64 = 1e-3;

#[derive(Debug, Clone, Copy)]
pub struct CheckOpts {
    pub step: f64,
    pub tol: f64,
    /// Components checked per tensor; larger tensors are subsampled
    /// deterministically.
    pub max_per_tensor: usize,
}

impl Default for CheckOpts {
    fn default() -> Self {
        CheckOpts {
            step: DEFAULT_STEP,
            tol: DEFAULT_TOL,
            max_per_tensor: 64,
        }
    }
}

/// Checks analytic gradients of `build`'s scalar output against central
/// finite differences for every named leaf. Panics on disagreement.
pub fn check_all<F>(leaves: &[(&str, Tensor)], build: F)
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    check_all_opts(leaves, CheckOpts::default(), build);
}

pub fn check_all_opts<F>(leaves: &[(&str, Tensor)], opts: CheckOpts, build: F)
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut graph = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|(n, t)| graph.param(n, t)).collect();
    let loss = build(&mut graph, &vars).expect("gradcheck: forward build failed");
    let mut grads = Gradients::new();
    graph.backward(loss, &mut grads).expect("gradcheck: backward failed");

    for (li, (name, t)) in leaves.iter().enumerate() {
        let analytic = grads
            .get(name)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()));
        for i in select_indices(t.len(), name, opts.max_per_tensor) {
            let fd = central_diff(leaves, li, i, opts.step, &build);
            let a = analytic.data()[i] as f64;
            let denom = a.abs().max(fd.abs()).max(1.0);
            let rel = (a - fd).abs() / denom;
            assert!(
                rel <= opts.tol,
                "gradcheck: {name}[{i}] analytic {a:.6e} vs fd {fd:.6e} (rel {rel:.3e} > {:.1e})",
                opts.tol
            );
        }
    }
}

/// One central-difference component: d(loss)/d(leaves[li][index]).
pub fn central_diff<F>(leaves: &[(&str, Tensor)], li: usize, index: usize, step: f64, build: &F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let orig = leaves[li].1.data()[index] as f64;
    let plus = (orig + step) as f32;
    let minus = (orig - step) as f32;
    let lp = eval_at(leaves, li, index, plus, build);
    let lm = eval_at(leaves, li, index, minus, build);
    (lp - lm) / (plus as f64 - minus as f64)
}

fn eval_at<F>(leaves: &[(&str, Tensor)], li: usize, index: usize, value: f32, build: &F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut graph = Graph::new();
    let vars: Vec<Var> = leaves
        .iter()
        .enumerate()
        .map(|(j, (_, t))| {
            if j == li {
                let mut t = t.clone();
                t.data_mut()[index] = value;
                graph.leaf(t)
            } else {
                graph.leaf(t.clone())
            }
        })
        .collect();
    let loss = build(&mut graph, &vars).expect("gradcheck: forward eval failed");
    let v = graph.value(loss);
    assert!(v.is_scalar(), "gradcheck: loss must be scalar");
    v.data()[0] as f64
}

fn select_indices(len: usize, name: &str, max: usize) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        let mut rng = RngStream::new(0x6764_6366).substream(name);
        let mut idx = rng.sample_indices(len, max);
        idx.sort_unstable();
        idx
    }
}
