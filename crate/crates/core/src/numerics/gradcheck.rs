//! Central finite-difference checks of tape gradients.

use super::rng::Rng;
use super::tape::{attention, Tape, Var};
use super::{NumericsError, Tensor};

type Result<T> = std::result::Result<T, NumericsError>;

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradReport {
    /// Relative error `|a - n| / max(|a|, |n|, 1e-6 * max(1, |f|))` per input,
    /// norms over all elements of that input. The floor scales with the
    /// output so the check is invariant to rescaling `f`.
    pub rel_errors: Vec<f64>,
    pub max_rel_error: f64,
}

fn relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    diff / na.max(nn).max(floor)
}

/// Evaluates `f` on fresh tapes and compares its autodiff gradient with
/// central differences of step `h`. Non-scalar outputs are reduced with a
/// fixed random weighting so the whole Jacobian is exercised.
pub fn check_gradients<F>(inputs: &[Tensor], f: F, h: f64) -> Result<GradReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    // Analytic pass.
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let loss = if out.value().numel() == 1 {
        out
    } else {
        let w = tape.constant(weights_for(&out.value()));
        out.mul(w)?.sum()?
    };
    let floor = 1e-6 * loss.value().data()[0].abs().max(1.0);
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get(v)).collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = perturbed.iter().map(|t| tape.param(t.clone())).collect();
        Ok(weighted_sum_value(&f(&tape, &vars)?.value()))
    };

    let mut rel_errors = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let base = input.data()[j];
            work[i].data_mut()[j] = base + h;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = base - h;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = base;
            *slot = (plus - minus) / (2.0 * h);
        }
        rel_errors.push(relative_error(analytic[i].data(), &numeric, floor));
    }
    let max_rel_error = rel_errors.iter().copied().fold(0.0, f64::max);
    Ok(GradReport { rel_errors, max_rel_error })
}

fn weights_for(t: &Tensor) -> Tensor {
    let mut rng = Rng::new(0x5EED_0F_9AD5 ^ t.numel() as u64);
    Tensor::from_parts(t.shape().to_vec(), rng.normal_vec(t.numel()))
}

fn weighted_sum_value(t: &Tensor) -> f64 {
    if t.numel() == 1 {
        return t.data()[0];
    }
    let w = weights_for(t);
    t.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

type Builder = for<'t> fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>;

/// A small graph exercising one primitive, used by the gradient-check suite.
pub struct PrimitiveCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub build: Builder,
}

fn rand_t(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), rng.normal_vec(n))
}

impl PrimitiveCase {
    fn new(name: &'static str, inputs: Vec<Tensor>, build: Builder) -> Self {
        Self { name, inputs, build }
    }

    /// One case per recorded primitive plus the composite attention.
    pub fn all() -> Vec<PrimitiveCase> {
        let mut rng = Rng::new(2024);
        let r = &mut rng;
        vec![
            Self::new("matmul", vec![rand_t(r, &[3, 4]), rand_t(r, &[4, 2])], |_, v| v[0].matmul(v[1])),
            Self::new("transpose", vec![rand_t(r, &[3, 4])], |_, v| v[0].t()),
            Self::new("add", vec![rand_t(r, &[3, 4]), rand_t(r, &[3, 4])], |_, v| v[0].add(v[1])),
            Self::new("sub", vec![rand_t(r, &[3, 4]), rand_t(r, &[3, 4])], |_, v| v[0].sub(v[1])),
            Self::new("mul", vec![rand_t(r, &[3, 4]), rand_t(r, &[3, 4])], |_, v| v[0].mul(v[1])),
            Self::new("add_row", vec![rand_t(r, &[3, 4]), rand_t(r, &[4])], |_, v| v[0].add_row(v[1])),
            Self::new("scale", vec![rand_t(r, &[3, 4])], |_, v| v[0].scale(-1.7)),
            Self::new("tanh", vec![rand_t(r, &[3, 4])], |_, v| v[0].tanh()),
            Self::new("sigmoid", vec![rand_t(r, &[3, 4])], |_, v| v[0].sigmoid()),
            Self::new("softmax", vec![rand_t(r, &[3, 5])], |_, v| v[0].softmax()),
            Self::new(
                "layer_norm",
                vec![rand_t(r, &[3, 6]), rand_t(r, &[6]), rand_t(r, &[6])],
                |_, v| v[0].layer_norm(v[1], v[2], 1e-5),
            ),
            Self::new("group_norm", vec![rand_t(r, &[2, 8])], |_, v| v[0].group_norm(4, 1e-5)),
            Self::new("mean", vec![rand_t(r, &[3, 4])], |_, v| v[0].tanh()?.mean()),
            Self::new("sum", vec![rand_t(r, &[3, 4])], |_, v| v[0].tanh()?.sum()),
            Self::new("mse", vec![rand_t(r, &[3, 4]), rand_t(r, &[3, 4])], |_, v| v[0].mse(v[1])),
            Self::new("l1", vec![rand_t(r, &[3, 4]), rand_t(r, &[3, 4])], |_, v| v[0].l1(v[1])),
            Self::new("reshape", vec![rand_t(r, &[3, 4])], |_, v| v[0].reshape(&[2, 6])),
            Self::new("slice_cols", vec![rand_t(r, &[3, 5])], |_, v| v[0].slice_cols(1, 3)),
            Self::new("slice_rows", vec![rand_t(r, &[4, 3])], |_, v| v[0].slice_rows(1, 2)),
            Self::new(
                "concat_cols",
                vec![rand_t(r, &[3, 2]), rand_t(r, &[3, 4])],
                |_, v| Var::concat_cols(&[v[0], v[1]]),
            ),
            Self::new(
                "concat_rows",
                vec![rand_t(r, &[2, 3]), rand_t(r, &[1, 3])],
                |_, v| Var::concat_rows(&[v[0], v[1]]),
            ),
            Self::new(
                "stack_last",
                vec![rand_t(r, &[3, 2]), rand_t(r, &[3, 2]), rand_t(r, &[3, 2])],
                |_, v| Var::stack_last(&[v[0], v[1], v[2]]),
            ),
            Self::new("select_last", vec![rand_t(r, &[3, 2, 4])], |_, v| v[0].select_last(2)),
            Self::new(
                "attention",
                vec![rand_t(r, &[4, 6]), rand_t(r, &[5, 6]), rand_t(r, &[5, 4])],
                |_, v| attention(v[0], v[1], v[2], 2),
            ),
        ]
    }
}
