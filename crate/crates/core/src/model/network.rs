use rayon::prelude::*;

use super::{BackboneSpec, Gradients, ModelError, ModelParams};
use crate::encoder::Canvas;

/// Converts a canvas into the CHW tensor entering the first conv stage,
/// applying the fixed average-pooling stem and scaling bytes to [0, 1].
pub fn prepare_input(spec: &BackboneSpec, canvas: &Canvas) -> Result<Vec<f64>, ModelError> {
    if canvas.height() != spec.input_size || canvas.width() != spec.input_size {
        return Err(ModelError::InputSize {
            expected: spec.input_size,
            found_h: canvas.height(),
            found_w: canvas.width(),
        });
    }
    let p = spec.input_pool;
    let side = spec.working_size();
    let scale = 1.0 / (255.0 * (p * p) as f64);
    let mut sums = vec![0u32; 3 * side * side];
    let px = canvas.pixels();
    for y in 0..spec.input_size {
        let row = &px[y * spec.input_size * 3..(y + 1) * spec.input_size * 3];
        let base = (y / p) * side;
        for (x, rgb) in row.chunks_exact(3).enumerate() {
            let cell = base + x / p;
            for c in 0..3 {
                sums[c * side * side + cell] += rgb[c] as u32;
            }
        }
    }
    Ok(sums.into_iter().map(|s| s as f64 * scale).collect())
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input of every conv stage, followed by the flattened tensor fed to the feature layer.
    stage_inputs: Vec<Vec<f64>>,
    /// Pre-activation output of every conv stage.
    pre: Vec<Vec<f64>>,
    pub feature: Vec<f64>,
    pub logits: Vec<f64>,
}

pub(crate) fn forward_cached(params: &ModelParams, input: &[f64]) -> ForwardCache {
    let spec = params.spec();
    let mut side = spec.working_size();
    let mut in_ch = 3;
    let mut stage_inputs = vec![input.to_vec()];
    let mut pre = Vec::with_capacity(spec.conv_channels.len());
    for (stage, &out_ch) in spec.conv_channels.iter().enumerate() {
        let (w, b) = params.conv(stage);
        let z = conv3x3(
            stage_inputs.last().unwrap(),
            in_ch,
            side,
            &w.data,
            &b.data,
            out_ch,
        );
        let act: Vec<f64> = z.iter().map(|&v| spec.activation.apply(v)).collect();
        stage_inputs.push(avg_pool2(&act, out_ch, side));
        pre.push(z);
        side /= 2;
        in_ch = out_ch;
    }
    let (fw, fb) = params.feature_layer();
    let feature = dense(&fw.data, &fb.data, stage_inputs.last().unwrap());
    let (cw, cb) = params.classifier();
    let logits = dense(&cw.data, &cb.data, &feature);
    ForwardCache {
        stage_inputs,
        pre,
        feature,
        logits,
    }
}

/// Feature vector of one canvas.
pub fn forward(params: &ModelParams, canvas: &Canvas) -> Result<Vec<f64>, ModelError> {
    let input = prepare_input(params.spec(), canvas)?;
    Ok(forward_cached(params, &input).feature)
}

/// Features of many canvases, in input order.
pub fn forward_batch(
    params: &ModelParams,
    canvases: &[Canvas],
) -> Result<Vec<Vec<f64>>, ModelError> {
    canvases.par_iter().map(|c| forward(params, c)).collect()
}

/// Accumulates parameter gradients of one sample given the loss gradient
/// with respect to its feature vector and its logits.
pub(crate) fn backward(
    params: &ModelParams,
    cache: &ForwardCache,
    dfeature: &[f64],
    dlogits: &[f64],
    grads: &mut Gradients,
) {
    let spec = params.spec();
    let stages = spec.conv_channels.len();

    let (cw, _) = params.classifier();
    let mut df = dfeature.to_vec();
    dense_backward(
        &cw.data,
        &cache.feature,
        dlogits,
        &mut df,
        2 * stages + 2,
        grads,
    );

    let (fw, _) = params.feature_layer();
    let flat = &cache.stage_inputs[stages];
    let mut dflat = vec![0.0; flat.len()];
    dense_backward(&fw.data, flat, &df, &mut dflat, 2 * stages, grads);

    let mut dout = dflat;
    for stage in (0..stages).rev() {
        let out_ch = spec.conv_channels[stage];
        let in_ch = if stage == 0 {
            3
        } else {
            spec.conv_channels[stage - 1]
        };
        let side = spec.working_size() >> stage;
        let z = &cache.pre[stage];
        let mut dz = avg_pool2_backward(&dout, out_ch, side);
        for (d, &v) in dz.iter_mut().zip(z) {
            *d *= spec.activation.derivative(v);
        }
        let (w, _) = params.conv(stage);
        let need_input_grad = stage > 0;
        let din = conv3x3_backward(
            &cache.stage_inputs[stage],
            in_ch,
            side,
            &w.data,
            out_ch,
            &dz,
            2 * stage,
            grads,
            need_input_grad,
        );
        dout = din;
    }
}

fn dense(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let n_in = x.len();
    b.iter()
        .enumerate()
        .map(|(j, &bj)| {
            bj + w[j * n_in..(j + 1) * n_in]
                .iter()
                .zip(x)
                .map(|(a, c)| a * c)
                .sum::<f64>()
        })
        .collect()
}

fn dense_backward(
    w: &[f64],
    x: &[f64],
    dy: &[f64],
    dx: &mut [f64],
    index: usize,
    grads: &mut Gradients,
) {
    let n_in = x.len();
    let (head, tail) = grads.tensors.split_at_mut(index + 1);
    let gw = &mut head[index];
    let gb = &mut tail[0];
    for (j, &d) in dy.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        gb[j] += d;
        let row = &w[j * n_in..(j + 1) * n_in];
        for ((g, &xi), (dxi, &wi)) in gw[j * n_in..(j + 1) * n_in]
            .iter_mut()
            .zip(x)
            .zip(dx.iter_mut().zip(row))
        {
            *g += d * xi;
            *dxi += d * wi;
        }
    }
}

// Valid output range along one axis for kernel offset k (0..3) under zero padding 1.
#[inline]
fn span(k: usize, side: usize) -> (usize, usize) {
    let lo = if k == 0 { 1 } else { 0 };
    let hi = if k == 2 { side - 1 } else { side };
    (lo, hi)
}

fn conv3x3(
    input: &[f64],
    in_ch: usize,
    side: usize,
    w: &[f64],
    b: &[f64],
    out_ch: usize,
) -> Vec<f64> {
    let n = side * side;
    let mut out = vec![0.0; out_ch * n];
    for (o, dst) in out.chunks_exact_mut(n).enumerate() {
        dst.fill(b[o]);
        for i in 0..in_ch {
            let src = &input[i * n..(i + 1) * n];
            for ky in 0..3 {
                let (y0, y1) = span(ky, side);
                for kx in 0..3 {
                    let wv = w[((o * in_ch + i) * 3 + ky) * 3 + kx];
                    let (x0, x1) = span(kx, side);
                    for y in y0..y1 {
                        let sy = y + ky - 1;
                        let d = &mut dst[y * side + x0..y * side + x1];
                        let s = &src[sy * side + x0 + kx - 1..sy * side + x1 + kx - 1];
                        for (dv, sv) in d.iter_mut().zip(s) {
                            *dv += wv * sv;
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv3x3_backward(
    input: &[f64],
    in_ch: usize,
    side: usize,
    w: &[f64],
    out_ch: usize,
    dz: &[f64],
    index: usize,
    grads: &mut Gradients,
    need_input_grad: bool,
) -> Vec<f64> {
    let n = side * side;
    let mut din = if need_input_grad {
        vec![0.0; in_ch * n]
    } else {
        Vec::new()
    };
    let (head, tail) = grads.tensors.split_at_mut(index + 1);
    let gw = &mut head[index];
    let gb = &mut tail[0];
    for o in 0..out_ch {
        let d_o = &dz[o * n..(o + 1) * n];
        gb[o] += d_o.iter().sum::<f64>();
        for i in 0..in_ch {
            let src = &input[i * n..(i + 1) * n];
            for ky in 0..3 {
                let (y0, y1) = span(ky, side);
                for kx in 0..3 {
                    let widx = ((o * in_ch + i) * 3 + ky) * 3 + kx;
                    let wv = w[widx];
                    let (x0, x1) = span(kx, side);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = y + ky - 1;
                        let d = &d_o[y * side + x0..y * side + x1];
                        let s = &src[sy * side + x0 + kx - 1..sy * side + x1 + kx - 1];
                        acc += d.iter().zip(s).map(|(a, b)| a * b).sum::<f64>();
                        if need_input_grad {
                            let di = &mut din
                                [i * n + sy * side + x0 + kx - 1..i * n + sy * side + x1 + kx - 1];
                            for (dv, gv) in di.iter_mut().zip(d) {
                                *dv += wv * gv;
                            }
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
    din
}

fn avg_pool2(x: &[f64], ch: usize, side: usize) -> Vec<f64> {
    let half = side / 2;
    let mut out = vec![0.0; ch * half * half];
    for c in 0..ch {
        let src = &x[c * side * side..(c + 1) * side * side];
        let dst = &mut out[c * half * half..(c + 1) * half * half];
        for y in 0..half {
            for xo in 0..half {
                let a = src[2 * y * side + 2 * xo];
                let b = src[2 * y * side + 2 * xo + 1];
                let cc = src[(2 * y + 1) * side + 2 * xo];
                let d = src[(2 * y + 1) * side + 2 * xo + 1];
                dst[y * half + xo] = 0.25 * (a + b + cc + d);
            }
        }
    }
    out
}

fn avg_pool2_backward(dout: &[f64], ch: usize, side: usize) -> Vec<f64> {
    let half = side / 2;
    let mut dx = vec![0.0; ch * side * side];
    for c in 0..ch {
        for y in 0..side {
            for x in 0..side {
                dx[c * side * side + y * side + x] =
                    0.25 * dout[c * half * half + (y / 2) * half + x / 2];
            }
        }
    }
    dx
}
