//! Precision-generic forward/backward kernels. Training instantiates them at
//! `f32`; the gradient checker instantiates the same code at `f64`.

use std::ops::AddAssign;

use num_traits::Float;

pub(crate) trait Scalar: Float + AddAssign + std::iter::Sum + 'static {
    /// `c = a · b (+ c if accumulate)`, `c` row-major `m×n`, strided `a`/`b`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (usize, usize),
        b: &[Self],
        b_strides: (usize, usize),
        c: &mut [Self],
        accumulate: bool,
    );
}

fn check_bounds<T>(m: usize, k: usize, n: usize, a: &[T], (rsa, csa): (usize, usize), b: &[T], (rsb, csb): (usize, usize), c: &[T]) {
    assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert_eq!(c.len(), m * n);
}

macro_rules! scalar_impl {
    ($t:ty, $f:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[$t],
                (rsa, csa): (usize, usize),
                b: &[$t],
                (rsb, csb): (usize, usize),
                c: &mut [$t],
                accumulate: bool,
            ) {
                check_bounds(m, k, n, a, (rsa, csa), b, (rsb, csb), c);
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: operand extents were checked against the strides above.
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa as isize,
                        csa as isize,
                        b.as_ptr(),
                        rsb as isize,
                        csb as isize,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

scalar_impl!(f32, matrixmultiply::sgemm);
scalar_impl!(f64, matrixmultiply::dgemm);

#[derive(Clone, Copy)]
pub(crate) struct LayerView<'a, T> {
    pub weight: &'a [T],
    pub bias: &'a [T],
    pub fan_in: usize,
    pub fan_out: usize,
}

/// Post-activation outputs of every layer; the last entry is the logits.
pub(crate) fn forward_activations<T: Scalar>(
    layers: &[LayerView<'_, T>],
    inputs: &[T],
    rows: usize,
) -> Vec<Vec<T>> {
    let last = layers.len() - 1;
    let mut acts: Vec<Vec<T>> = Vec::with_capacity(layers.len());
    for (l, layer) in layers.iter().enumerate() {
        let input: &[T] = if l == 0 { inputs } else { &acts[l - 1] };
        let mut out = Vec::with_capacity(rows * layer.fan_out);
        for _ in 0..rows {
            out.extend_from_slice(layer.bias);
        }
        T::gemm(
            rows,
            layer.fan_in,
            layer.fan_out,
            input,
            (layer.fan_in, 1),
            layer.weight,
            (layer.fan_out, 1),
            &mut out,
            true,
        );
        if l != last {
            let zero = T::zero();
            out.iter_mut().for_each(|v| *v = v.max(zero));
        }
        acts.push(out);
    }
    acts
}

/// Row-wise `-log softmax[label]` and `(softmax - onehot) / rows`.
/// Labels must already be range-checked.
pub(crate) fn softmax_xent<T: Scalar>(logits: &[T], classes: usize, labels: &[usize]) -> (f64, Vec<T>) {
    let rows = labels.len();
    let scale = T::one() / T::from(rows).expect("row count fits");
    let mut total = 0.0f64;
    let mut grad = vec![T::zero(); rows * classes];
    for (r, &y) in labels.iter().enumerate() {
        let row = &logits[r * classes..(r + 1) * classes];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let out = &mut grad[r * classes..(r + 1) * classes];
        let mut sum = T::zero();
        for (o, &z) in out.iter_mut().zip(row) {
            *o = (z - max).exp();
            sum += *o;
        }
        for o in out.iter_mut() {
            *o = *o / sum * scale;
        }
        out[y] = out[y] - scale;
        total += row_loss(row, y).to_f64().expect("finite");
    }
    (total / rows as f64, grad)
}

/// `-log softmax(row)[label]`, written so the label term never rounds away.
pub(crate) fn row_loss<T: Scalar>(row: &[T], label: usize) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let tail: T = row
        .iter()
        .enumerate()
        .filter(|&(c, _)| c != label)
        .map(|(_, &z)| (z - max).exp())
        .sum();
    let shifted = row[label] - max;
    (shifted.exp() + tail).ln() - shifted
}

/// Mean loss and `(weight_grad, bias_grad)` per layer.
pub(crate) fn backward<T: Scalar>(
    layers: &[LayerView<'_, T>],
    inputs: &[T],
    labels: &[usize],
) -> (f64, Vec<(Vec<T>, Vec<T>)>) {
    let rows = labels.len();
    let mut acts = forward_activations(layers, inputs, rows);
    let logits = acts.pop().expect("at least one layer");
    let classes = layers[layers.len() - 1].fan_out;
    let (loss, mut delta) = softmax_xent(&logits, classes, labels);

    let mut grads: Vec<(Vec<T>, Vec<T>)> = Vec::with_capacity(layers.len());
    for l in (0..layers.len()).rev() {
        let layer = &layers[l];
        let (fan_in, fan_out) = (layer.fan_in, layer.fan_out);
        let input: &[T] = if l == 0 { inputs } else { &acts[l - 1] };

        let mut dw = vec![T::zero(); fan_in * fan_out];
        T::gemm(fan_in, rows, fan_out, input, (1, fan_in), &delta, (fan_out, 1), &mut dw, false);
        let mut db = vec![T::zero(); fan_out];
        for r in 0..rows {
            for (acc, &d) in db.iter_mut().zip(&delta[r * fan_out..(r + 1) * fan_out]) {
                *acc += d;
            }
        }
        grads.push((dw, db));

        if l > 0 {
            let mut prev = vec![T::zero(); rows * fan_in];
            T::gemm(rows, fan_out, fan_in, &delta, (fan_out, 1), layer.weight, (1, fan_out), &mut prev, false);
            for (p, &a) in prev.iter_mut().zip(&acts[l - 1]) {
                if a <= T::zero() {
                    *p = T::zero();
                }
            }
            delta = prev;
        }
    }
    grads.reverse();
    (loss, grads)
}
