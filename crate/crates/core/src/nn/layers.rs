//! Dense layers and small MLPs over batches of row vectors.
//!
//! A dense layer `name` owns `name.weight` (`out x in`) and `name.bias`
//! (`out`). An MLP `prefix` is the chain `prefix.fc0, prefix.fc1, ...` with
//! leaky-ReLU between layers and a linear output.

use rayon::prelude::*;

use super::params::ParamStore;
use crate::error::{shape_err, Result, VloError};

pub const LEAKY_SLOPE: f64 = 0.1;

/// Row-count above which dense forward passes are split across threads.
const PAR_ROWS: usize = 512;

#[inline]
pub fn leaky_relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

#[inline]
pub fn leaky_relu_grad(pre: f64) -> f64 {
    if pre > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `(out, in)` of a dense layer.
pub fn dense_dims(params: &ParamStore, name: &str) -> Result<(usize, usize)> {
    let w = params.get(&format!("{name}.weight"))?;
    match w.shape.as_slice() {
        [o, i] => Ok((*o, *i)),
        other => Err(shape_err(format!("{name}.weight"), "2-d", format!("{other:?}"))),
    }
}

pub fn init_dense(params: &mut ParamStore, name: &str, input: usize, output: usize, scale: f64) {
    params.init_uniform(&format!("{name}.weight"), &[output, input], input, scale);
    params.init_uniform(&format!("{name}.bias"), &[output], input, scale);
}

/// Identity weight, zero bias (square layers only).
pub fn set_dense_identity(params: &mut ParamStore, name: &str, dim: usize) -> Result<()> {
    let mut w = vec![0.0; dim * dim];
    for i in 0..dim {
        w[i * dim + i] = 1.0;
    }
    params.insert(format!("{name}.weight"), &[dim, dim], w)?;
    params.insert(format!("{name}.bias"), &[dim], vec![0.0; dim])
}

/// `y = x W^T + b` for `rows` input rows.
pub fn dense(params: &ParamStore, name: &str, x: &[f64], rows: usize) -> Result<Vec<f64>> {
    let (out, inp) = dense_dims(params, name)?;
    if x.len() != rows * inp {
        return Err(shape_err(format!("{name} input"), rows * inp, x.len()));
    }
    let w = params.data(&format!("{name}.weight"))?;
    let b = params.data(&format!("{name}.bias"))?;
    if b.len() != out {
        return Err(shape_err(format!("{name}.bias"), out, b.len()));
    }
    let mut y = vec![0.0; rows * out];
    let kernel = |(yr, xr): (&mut [f64], &[f64])| {
        for o in 0..out {
            let wr = &w[o * inp..(o + 1) * inp];
            let mut acc = b[o];
            for i in 0..inp {
                acc += wr[i] * xr[i];
            }
            yr[o] = acc;
        }
    };
    if out == 0 || inp == 0 {
        return Ok(y);
    }
    if rows >= PAR_ROWS {
        y.par_chunks_mut(out).zip(x.par_chunks(inp)).for_each(kernel);
    } else {
        y.chunks_mut(out).zip(x.chunks(inp)).for_each(kernel);
    }
    Ok(y)
}

/// Accumulates weight/bias adjoints into `grads` and returns `dx`.
pub fn dense_backward(
    params: &ParamStore,
    name: &str,
    x: &[f64],
    rows: usize,
    dy: &[f64],
    grads: &mut ParamStore,
) -> Result<Vec<f64>> {
    let (out, inp) = dense_dims(params, name)?;
    if x.len() != rows * inp || dy.len() != rows * out {
        return Err(shape_err(
            format!("{name} backward"),
            format!("x {} / dy {}", rows * inp, rows * out),
            format!("x {} / dy {}", x.len(), dy.len()),
        ));
    }
    let w = params.data(&format!("{name}.weight"))?;
    let mut dx = vec![0.0; rows * inp];
    let mut dw = vec![0.0; out * inp];
    let mut db = vec![0.0; out];
    for r in 0..rows {
        let xr = &x[r * inp..(r + 1) * inp];
        let dyr = &dy[r * out..(r + 1) * out];
        let dxr = &mut dx[r * inp..(r + 1) * inp];
        for o in 0..out {
            let g = dyr[o];
            if g == 0.0 {
                continue;
            }
            db[o] += g;
            let wr = &w[o * inp..(o + 1) * inp];
            let dwr = &mut dw[o * inp..(o + 1) * inp];
            for i in 0..inp {
                dxr[i] += wr[i] * g;
                dwr[i] += xr[i] * g;
            }
        }
    }
    grads.accumulate(&format!("{name}.weight"), &dw)?;
    grads.accumulate(&format!("{name}.bias"), &db)?;
    Ok(dx)
}

pub fn mlp_layer_name(prefix: &str, i: usize) -> String {
    format!("{prefix}.fc{i}")
}

pub fn mlp_depth(params: &ParamStore, prefix: &str) -> usize {
    (0..)
        .take_while(|i| params.contains(&format!("{}.weight", mlp_layer_name(prefix, *i))))
        .count()
}

/// `dims = [in, hidden..., out]`.
pub fn init_mlp(params: &mut ParamStore, prefix: &str, dims: &[usize], scale: f64) {
    for (i, pair) in dims.windows(2).enumerate() {
        init_dense(params, &mlp_layer_name(prefix, i), pair[0], pair[1], scale);
    }
}

#[derive(Clone, Debug)]
pub struct MlpCache {
    rows: usize,
    /// Input to each layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation output of each hidden layer.
    pre: Vec<Vec<f64>>,
}

pub fn mlp_forward(params: &ParamStore, prefix: &str, x: &[f64], rows: usize) -> Result<(Vec<f64>, MlpCache)> {
    let depth = mlp_depth(params, prefix);
    if depth == 0 {
        return Err(VloError::MissingParam(format!("{prefix}.fc0")));
    }
    let mut inputs = Vec::with_capacity(depth);
    let mut pre = Vec::with_capacity(depth);
    let mut h = x.to_vec();
    for i in 0..depth {
        let y = dense(params, &mlp_layer_name(prefix, i), &h, rows)?;
        inputs.push(h);
        if i + 1 < depth {
            h = y.iter().map(|v| leaky_relu(*v)).collect();
            pre.push(y);
        } else {
            h = y;
        }
    }
    Ok((h, MlpCache { rows, inputs, pre }))
}

pub fn mlp(params: &ParamStore, prefix: &str, x: &[f64], rows: usize) -> Result<Vec<f64>> {
    Ok(mlp_forward(params, prefix, x, rows)?.0)
}

pub fn mlp_backward(
    params: &ParamStore,
    prefix: &str,
    cache: &MlpCache,
    dy: &[f64],
    grads: &mut ParamStore,
) -> Result<Vec<f64>> {
    let depth = cache.inputs.len();
    let mut g = dy.to_vec();
    for i in (0..depth).rev() {
        if i + 1 < depth {
            for (gv, p) in g.iter_mut().zip(&cache.pre[i]) {
                *gv *= leaky_relu_grad(*p);
            }
        }
        g = dense_backward(params, &mlp_layer_name(prefix, i), &cache.inputs[i], cache.rows, &g, grads)?;
    }
    Ok(g)
}

/// Softmax over `rows` independently for each of `cols` columns of a
/// row-major `rows x cols` matrix.
pub fn softmax_columns(z: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; z.len()];
    for c in 0..cols {
        let max = (0..rows).map(|r| z[r * cols + c]).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for r in 0..rows {
            let e = (z[r * cols + c] - max).exp();
            out[r * cols + c] = e;
            sum += e;
        }
        for r in 0..rows {
            out[r * cols + c] /= sum;
        }
    }
    out
}

/// Adjoint of [`softmax_columns`] given its output `s`.
pub fn softmax_columns_backward(s: &[f64], ds: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut dz = vec![0.0; s.len()];
    for c in 0..cols {
        let dot: f64 = (0..rows).map(|r| s[r * cols + c] * ds[r * cols + c]).sum();
        for r in 0..rows {
            let i = r * cols + c;
            dz[i] = s[i] * (ds[i] - dot);
        }
    }
    dz
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_give_bias() {
        let mut p = ParamStore::new(0);
        p.insert("d.weight", &[2, 3], vec![0.0; 6]).unwrap();
        p.insert("d.bias", &[2], vec![0.5, -1.0]).unwrap();
        assert_eq!(dense(&p, "d", &[1.0, 2.0, 3.0], 1).unwrap(), vec![0.5, -1.0]);
    }

    #[test]
    fn identity_weights_pass_through() {
        let mut p = ParamStore::new(0);
        set_dense_identity(&mut p, "d", 3).unwrap();
        assert_eq!(dense(&p, "d", &[1.0, -2.0, 3.5], 1).unwrap(), vec![1.0, -2.0, 3.5]);
    }

    #[test]
    fn dense_matches_naive_dot_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut p = ParamStore::new(5);
        init_dense(&mut p, "d", 7, 4, 1.0);
        let x: Vec<f64> = (0..3 * 7).map(|_| rng.random_range(-2.0..2.0)).collect();
        let y = dense(&p, "d", &x, 3).unwrap();
        let w = &p.get("d.weight").unwrap().data;
        let b = &p.get("d.bias").unwrap().data;
        for r in 0..3 {
            for o in 0..4 {
                let mut acc = 0.0;
                for i in 0..7 {
                    acc += w[o * 7 + i] * x[r * 7 + i];
                }
                acc += b[o];
                assert!((y[r * 4 + o] - acc).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = ParamStore::new(0);
        init_dense(&mut p, "d", 3, 2, 1.0);
        assert!(dense(&p, "d", &[1.0, 2.0], 1).is_err());
    }

    #[test]
    fn softmax_columns_sum_to_one() {
        let z = vec![1.0, -3.0, 0.5, 2.0, 7.0, 0.0];
        let s = softmax_columns(&z, 3, 2);
        for c in 0..2 {
            let total: f64 = (0..3).map(|r| s[r * 2 + c]).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }
}
