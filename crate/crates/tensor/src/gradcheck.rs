//! Central finite-difference gradient checks.
//!
//! Each check reduces an op's output to a scalar through a fixed random
//! projection `mean(out ⊙ R)`, differentiates it with the tape, and compares
//! against `(f(x + h) − f(x − h)) / 2h` evaluated with plain forward passes.

use std::sync::Arc;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::tape::{LinearOperator, Tape, Var};
use crate::tensor::Tensor;

const STEP: f64 = 1e-6;
/// Elements probed per input; larger inputs are subsampled.
const MAX_PROBES: usize = 48;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub op: String,
    pub shape: Vec<usize>,
    /// ‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖) over all probed elements.
    pub rel_error: f64,
    pub probes: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.rel_error.is_finite() && self.rel_error <= tol
    }
}

type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

/// Checks all inputs of `build` at the given point.
pub fn check<R: Rng>(
    op: &str,
    inputs: &[Tensor<f64>],
    build: &Build,
    rng: &mut R,
) -> Result<GradCheck> {
    let out_shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        tape.shape(out).to_vec()
    };
    let projection = Tensor::<f64>::randn(&out_shape, 1.0, rng);

    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        let r = tape.constant(projection.clone());
        let prod = tape.mul(out, r)?;
        let loss = tape.mean(prod);
        Ok(tape.value(loss).data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let r = tape.constant(projection.clone());
    let prod = tape.mul(out, r)?;
    let loss = tape.mean(prod);
    let grads = tape.backward(loss)?;

    let mut diff_sq = 0.0;
    let mut ana_sq = 0.0;
    let mut num_sq = 0.0;
    let mut probes = 0;
    let mut work = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let n = inputs[i].numel();
        let zeros = vec![0.0; n];
        let analytic = grads.get(v).unwrap_or(&zeros);
        let picks: Vec<usize> = if n <= MAX_PROBES {
            (0..n).collect()
        } else {
            (0..MAX_PROBES).map(|_| rng.random_range(0..n)).collect()
        };
        for j in picks {
            let orig = work[i].data()[j];
            let h = STEP * orig.abs().max(1.0);
            work[i].data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            diff_sq += (analytic[j] - numeric).powi(2);
            ana_sq += analytic[j].powi(2);
            num_sq += numeric.powi(2);
            probes += 1;
        }
    }
    let denom = ana_sq.sqrt().max(num_sq.sqrt()).max(1e-12);
    Ok(GradCheck {
        op: op.to_string(),
        shape: inputs.first().map(|t| t.shape().to_vec()).unwrap_or_default(),
        rel_error: diff_sq.sqrt() / denom,
        probes,
    })
}

/// Dense matrix operator, used to check the linear-operator hook.
struct DenseOperator {
    rows: usize,
    cols: usize,
    matrix: Vec<f64>,
}

impl LinearOperator<f64> for DenseOperator {
    fn input_shape(&self) -> Vec<usize> {
        vec![self.cols]
    }
    fn output_shape(&self) -> Vec<usize> {
        vec![self.rows]
    }
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            *o = (0..self.cols).map(|c| self.matrix[r * self.cols + c] * x[c]).sum();
        }
    }
    fn apply_adjoint(&self, y: &[f64], out: &mut [f64]) {
        for (c, o) in out.iter_mut().enumerate() {
            *o = (0..self.rows).map(|r| self.matrix[r * self.cols + c] * y[r]).sum();
        }
    }
}

fn randn<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

/// Every differentiable tape op at five or more shapes.
///
/// The straight-through op is excluded: its value is piecewise constant in
/// its input, so it has no finite-difference gradient to compare against.
pub fn op_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut out = Vec::new();
    let elementwise_shapes: [&[usize]; 5] = [&[1], &[7], &[2, 3], &[2, 3, 4], &[1, 2, 2, 3, 2]];

    for shape in elementwise_shapes {
        let (a, b) = (randn(shape, &mut rng), randn(shape, &mut rng));
        out.push(check("add", &[a.clone(), b.clone()], &|t, v| t.add(v[0], v[1]), &mut rng)?);
        out.push(check("sub", &[a.clone(), b.clone()], &|t, v| t.sub(v[0], v[1]), &mut rng)?);
        out.push(check("mul", &[a.clone(), b.clone()], &|t, v| t.mul(v[0], v[1]), &mut rng)?);
        out.push(check("affine", &[a.clone()], &|t, v| Ok(t.affine(v[0], -1.7, 0.3)), &mut rng)?);
        out.push(check("silu", &[a.clone()], &|t, v| Ok(t.silu(v[0])), &mut rng)?);
        out.push(check("mean", &[a.clone()], &|t, v| Ok(t.mean(v[0])), &mut rng)?);
        out.push(check("mse", &[a.clone(), b.clone()], &|t, v| t.mse(v[0], v[1]), &mut rng)?);
        let n = a.numel();
        out.push(check(
            "reshape",
            &[a.clone()],
            &move |t, v| t.reshape(v[0], &[n]),
            &mut rng,
        )?);
    }

    let gn_shapes: [(usize, usize, &[usize]); 5] = [
        (1, 4, &[1, 1, 1]),
        (2, 4, &[2, 2, 2]),
        (1, 8, &[3, 1, 2]),
        (2, 8, &[1, 2, 3]),
        (1, 12, &[2, 2, 1]),
    ];
    for (n, c, sp) in gn_shapes {
        let mut shape = vec![n, c];
        shape.extend_from_slice(sp);
        let x = randn(&shape, &mut rng);
        let gamma = randn(&[c], &mut rng);
        let beta = randn(&[c], &mut rng);
        out.push(check(
            "group_norm",
            &[x, gamma, beta],
            &|t, v| t.group_norm(v[0], v[1], v[2], 4),
            &mut rng,
        )?);
    }

    // (batch, c_in, c_out, extent, k, stride, pad)
    let conv_cases = [
        (1, 2, 1, [4, 4, 4], 3, 1, 0),
        (1, 1, 2, [3, 4, 5], 3, 1, 1),
        (2, 2, 3, [5, 5, 5], 3, 2, 1),
        (1, 3, 2, [4, 4, 4], 1, 1, 0),
        (1, 2, 2, [6, 5, 4], 3, 2, 0),
        (1, 1, 1, [5, 5, 5], 5, 1, 2),
    ];
    for (n, ci, co, ext, k, s, p) in conv_cases {
        let x = randn(&[n, ci, ext[0], ext[1], ext[2]], &mut rng);
        let w = randn(&[co, ci, k, k, k], &mut rng);
        let b = randn(&[co], &mut rng);
        out.push(check(
            "conv3d",
            &[x, w, b],
            &move |t, v| t.conv3d(v[0], v[1], Some(v[2]), s, p),
            &mut rng,
        )?);
    }

    let tconv_cases = [
        (1, 1, 1, [1, 1, 1], 2, 2, 0),
        (1, 2, 3, [2, 2, 2], 2, 2, 0),
        (2, 3, 2, [3, 2, 2], 3, 1, 1),
        (1, 2, 2, [2, 3, 2], 3, 2, 1),
        (1, 2, 1, [2, 2, 2], 4, 2, 1),
    ];
    for (n, ci, co, ext, k, s, p) in tconv_cases {
        let x = randn(&[n, ci, ext[0], ext[1], ext[2]], &mut rng);
        let w = randn(&[ci, co, k, k, k], &mut rng);
        let b = randn(&[co], &mut rng);
        out.push(check(
            "transposed_conv3d",
            &[x, w, b],
            &move |t, v| t.transposed_conv3d(v[0], v[1], Some(v[2]), s, p),
            &mut rng,
        )?);
    }

    for (m, k, n) in [(1, 1, 1), (2, 3, 4), (4, 1, 3), (3, 5, 2), (6, 4, 6)] {
        let a = randn(&[m, k], &mut rng);
        let b = randn(&[k, n], &mut rng);
        out.push(check("matmul", &[a, b], &|t, v| t.matmul(v[0], v[1]), &mut rng)?);
    }

    let channel_shapes: [&[usize]; 5] = [&[1, 3], &[2, 2], &[1, 4, 2, 2, 2], &[2, 3, 1, 2, 1], &[3, 1, 5]];
    for (i, shape) in channel_shapes.iter().enumerate() {
        let x = randn(shape, &mut rng);
        let bias = if i % 2 == 0 {
            randn(&[shape[1]], &mut rng)
        } else {
            randn(&[shape[0], shape[1]], &mut rng)
        };
        out.push(check("add_channel", &[x, bias], &|t, v| t.add_channel(v[0], v[1]), &mut rng)?);
    }

    let concat_cases: [(&[usize], &[usize]); 5] = [
        (&[1, 1, 2], &[1, 2, 2]),
        (&[2, 3, 1, 1, 1], &[2, 1, 1, 1, 1]),
        (&[1, 2, 2, 2, 2], &[1, 2, 2, 2, 2]),
        (&[2, 1], &[2, 4]),
        (&[1, 3, 3], &[1, 1, 3]),
    ];
    for (sa, sb) in concat_cases {
        let a = randn(sa, &mut rng);
        let b = randn(sb, &mut rng);
        out.push(check("concat_channels", &[a, b], &|t, v| t.concat_channels(v), &mut rng)?);
    }

    let embed_cases: [(usize, usize, &[usize]); 5] = [
        (2, 1, &[1, 1]),
        (3, 2, &[1, 2, 2, 2]),
        (4, 4, &[2, 2, 1, 2]),
        (5, 3, &[1, 3, 1, 1]),
        (8, 4, &[2, 2, 2, 2]),
    ];
    for (k, dim, grid) in embed_cases {
        let table = randn(&[k, dim], &mut rng);
        let positions: usize = grid.iter().product();
        let codes: Vec<usize> = (0..positions).map(|_| rng.random_range(0..k)).collect();
        let grid = grid.to_vec();
        out.push(check(
            "embedding",
            &[table],
            &move |t, v| t.embedding(v[0], &codes, &grid),
            &mut rng,
        )?);
    }

    for (rows, cols) in [(1, 1), (3, 2), (2, 5), (7, 4), (4, 9)] {
        let op = Arc::new(DenseOperator {
            rows,
            cols,
            matrix: (0..rows * cols)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect(),
        });
        let x = randn(&[cols], &mut rng);
        out.push(check(
            "linear_op",
            &[x],
            &move |t, v| t.linear_op(v[0], op.clone()),
            &mut rng,
        )?);
    }

    Ok(out)
}
