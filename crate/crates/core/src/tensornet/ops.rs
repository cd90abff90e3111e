//! Free-standing differentiable operators used between networks.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Softmax over the spatial positions of each channel.
pub fn spatial_softmax(x: &Tensor) -> Result<Tensor> {
    let (c, _, _) = x.dims3()?;
    let mut y = x.clone();
    for ch in 0..c {
        let plane = y.channel_mut(ch);
        let max = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in plane.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        plane.iter_mut().for_each(|v| *v /= sum);
    }
    Ok(y)
}

/// Input gradient of [`spatial_softmax`] given its output `y`.
pub fn spatial_softmax_backward(y: &Tensor, g: &Tensor) -> Result<Tensor> {
    g.expect_shape(y.shape())?;
    let (c, _, _) = y.dims3()?;
    let mut dx = Tensor::zeros(y.shape());
    for ch in 0..c {
        let (yp, gp) = (y.channel(ch), g.channel(ch));
        let inner: f64 = yp.iter().zip(gp).map(|(a, b)| a * b).sum();
        for (d, (yv, gv)) in dx.channel_mut(ch).iter_mut().zip(yp.iter().zip(gp)) {
            *d = yv * (gv - inner);
        }
    }
    Ok(dx)
}

pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let (_, h, w) = parts
        .first()
        .ok_or_else(|| Error::Config("nothing to concatenate".into()))?
        .dims3()?;
    let mut c = 0;
    let mut data = Vec::new();
    for p in parts {
        let (pc, ph, pw) = p.dims3()?;
        if (ph, pw) != (h, w) {
            return Err(Error::Shape {
                expected: vec![pc, h, w],
                actual: p.shape().to_vec(),
            });
        }
        c += pc;
        data.extend_from_slice(p.data());
    }
    Tensor::from_vec(&[c, h, w], data)
}

/// Splits a `[sum(channels), H, W]` tensor back into its parts.
pub fn split_channels(x: &Tensor, channels: &[usize]) -> Result<Vec<Tensor>> {
    let (c, h, w) = x.dims3()?;
    if channels.iter().sum::<usize>() != c {
        return Err(Error::Config(format!("cannot split {c} channels into {channels:?}")));
    }
    let mut out = Vec::with_capacity(channels.len());
    let mut start = 0;
    for &n in channels {
        out.push(Tensor::from_vec(&[n, h, w], x.data()[start * h * w..(start + n) * h * w].to_vec())?);
        start += n;
    }
    Ok(out)
}

/// Multiplies every channel of `f` by the single-channel map `a`.
pub fn broadcast_mul(f: &Tensor, a: &Tensor) -> Result<Tensor> {
    let (c, h, w) = f.dims3()?;
    a.expect_shape(&[1, h, w])?;
    let mut y = f.clone();
    for ch in 0..c {
        for (v, s) in y.channel_mut(ch).iter_mut().zip(a.data()) {
            *v *= s;
        }
    }
    Ok(y)
}

/// Gradients of [`broadcast_mul`] with respect to `f` and `a`.
pub fn broadcast_mul_backward(f: &Tensor, a: &Tensor, g: &Tensor) -> Result<(Tensor, Tensor)> {
    let (c, _, _) = f.dims3()?;
    let df = broadcast_mul(g, a)?;
    let mut da = Tensor::zeros(a.shape());
    for ch in 0..c {
        for (d, (fv, gv)) in da.data_mut().iter_mut().zip(f.channel(ch).iter().zip(g.channel(ch))) {
            *d += fv * gv;
        }
    }
    Ok((df, da))
}

fn check_flow(f: &Tensor, flow: &Tensor) -> Result<(usize, usize, usize)> {
    let (c, h, w) = f.dims3()?;
    flow.expect_shape(&[2, h, w])?;
    if !flow.is_finite() {
        return Err(Error::Divergence("non-finite flow".into()));
    }
    Ok((c, h, w))
}

/// Bilinear stencil of a sample point: four `(x, y, weight)` taps.
fn stencil(sx: f64, sy: f64) -> ([(isize, isize); 4], [f64; 4], f64, f64) {
    let x0 = sx.floor();
    let y0 = sy.floor();
    let (ax, ay) = (sx - x0, sy - y0);
    let (x0, y0) = (x0 as isize, y0 as isize);
    (
        [(x0, y0), (x0 + 1, y0), (x0, y0 + 1), (x0 + 1, y0 + 1)],
        [(1.0 - ax) * (1.0 - ay), ax * (1.0 - ay), (1.0 - ax) * ay, ax * ay],
        ax,
        ay,
    )
}

/// Warps `f` by `flow`: output position `x` samples `f` at `x + flow(x)`
/// with bilinear interpolation. Channel 0 of `flow` is the horizontal
/// displacement, channel 1 the vertical. Samples outside the grid read zero.
pub fn bilinear_warp(f: &Tensor, flow: &Tensor) -> Result<Tensor> {
    let (c, h, w) = check_flow(f, flow)?;
    let plane = h * w;
    let mut out = Tensor::zeros(f.shape());
    let (fx, fy) = (flow.channel(0), flow.channel(1));
    let od = out.data_mut();
    let fd = f.data();
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let (taps, weights, _, _) = stencil(x as f64 + fx[p], y as f64 + fy[p]);
            for (&(tx, ty), &wt) in taps.iter().zip(&weights) {
                if wt == 0.0 || tx < 0 || ty < 0 || tx >= w as isize || ty >= h as isize {
                    continue;
                }
                let q = ty as usize * w + tx as usize;
                for ch in 0..c {
                    od[ch * plane + p] += wt * fd[ch * plane + q];
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`bilinear_warp`] with respect to `f` and `flow`.
pub fn bilinear_warp_backward(f: &Tensor, flow: &Tensor, g: &Tensor) -> Result<(Tensor, Tensor)> {
    let (c, h, w) = check_flow(f, flow)?;
    g.expect_shape(f.shape())?;
    let plane = h * w;
    let mut df = Tensor::zeros(f.shape());
    let mut dflow = Tensor::zeros(flow.shape());
    let (fx, fy) = (flow.channel(0), flow.channel(1));
    let fd = f.data();
    let gd = g.data();
    let at = |ch: usize, tx: isize, ty: isize| -> f64 {
        if tx < 0 || ty < 0 || tx >= w as isize || ty >= h as isize {
            0.0
        } else {
            fd[ch * plane + ty as usize * w + tx as usize]
        }
    };
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let (taps, weights, ax, ay) = stencil(x as f64 + fx[p], y as f64 + fy[p]);
            let (x0, y0) = taps[0];
            let mut gx = 0.0;
            let mut gy = 0.0;
            for ch in 0..c {
                let gv = gd[ch * plane + p];
                if gv == 0.0 {
                    continue;
                }
                for (&(tx, ty), &wt) in taps.iter().zip(&weights) {
                    if wt != 0.0 && tx >= 0 && ty >= 0 && tx < w as isize && ty < h as isize {
                        df.data_mut()[ch * plane + ty as usize * w + tx as usize] += wt * gv;
                    }
                }
                let (v00, v10, v01, v11) = (at(ch, x0, y0), at(ch, x0 + 1, y0), at(ch, x0, y0 + 1), at(ch, x0 + 1, y0 + 1));
                gx += gv * ((1.0 - ay) * (v10 - v00) + ay * (v11 - v01));
                gy += gv * ((1.0 - ax) * (v01 - v00) + ax * (v11 - v10));
            }
            dflow.data_mut()[p] = gx;
            dflow.data_mut()[plane + p] = gy;
        }
    }
    Ok((df, dflow))
}

/// Source coordinate and weights for half-pixel-centered resampling along
/// one axis.
fn resize_axis(out: usize, inp: usize) -> Vec<(usize, usize, f64)> {
    let scale = inp as f64 / out as f64;
    (0..out)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(inp - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of every channel to `height x width` (pixel centers
/// aligned, edges clamped).
pub fn resize_bilinear(x: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    let ry = resize_axis(height, h);
    let rx = resize_axis(width, w);
    let mut out = Tensor::zeros(&[c, height, width]);
    for ch in 0..c {
        let src = x.channel(ch);
        let dst = out.channel_mut(ch);
        for (oy, &(y0, y1, ay)) in ry.iter().enumerate() {
            for (ox, &(x0, x1, ax)) in rx.iter().enumerate() {
                dst[oy * width + ox] = (1.0 - ay) * ((1.0 - ax) * src[y0 * w + x0] + ax * src[y0 * w + x1])
                    + ay * ((1.0 - ax) * src[y1 * w + x0] + ax * src[y1 * w + x1]);
            }
        }
    }
    Ok(out)
}

/// Input gradient of [`resize_bilinear`] for an input of `in_shape`.
pub fn resize_bilinear_backward(in_shape: &[usize], g: &Tensor) -> Result<Tensor> {
    let (c, height, width) = g.dims3()?;
    let [ic, h, w] = in_shape[..] else {
        return Err(Error::Config(format!("resize input must be [C, H, W], got {in_shape:?}")));
    };
    if ic != c {
        return Err(Error::Shape {
            expected: vec![ic, height, width],
            actual: g.shape().to_vec(),
        });
    }
    let ry = resize_axis(height, h);
    let rx = resize_axis(width, w);
    let mut dx = Tensor::zeros(in_shape);
    for ch in 0..c {
        let gp = g.channel(ch).to_vec();
        let dst = dx.channel_mut(ch);
        for (oy, &(y0, y1, ay)) in ry.iter().enumerate() {
            for (ox, &(x0, x1, ax)) in rx.iter().enumerate() {
                let gv = gp[oy * width + ox];
                dst[y0 * w + x0] += (1.0 - ay) * (1.0 - ax) * gv;
                dst[y0 * w + x1] += (1.0 - ay) * ax * gv;
                dst[y1 * w + x0] += ay * (1.0 - ax) * gv;
                dst[y1 * w + x1] += ay * ax * gv;
            }
        }
    }
    Ok(dx)
}
