use super::{dims4, shape_mismatch, NnError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Avg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolParams {
    pub mode: PoolMode,
    pub window: (usize, usize),
    pub stride: usize,
    pub padding: usize,
}

impl PoolParams {
    pub fn max(window: usize, stride: usize, padding: usize) -> Self {
        PoolParams {
            mode: PoolMode::Max,
            window: (window, window),
            stride,
            padding,
        }
    }

    pub fn avg(window: (usize, usize), stride: usize) -> Self {
        PoolParams {
            mode: PoolMode::Avg,
            window,
            stride,
            padding: 0,
        }
    }
}

/// Bookkeeping carried from forward to backward: for max pooling the flat
/// input index of each window's winner, for avg nothing beyond shapes.
#[derive(Debug, Clone)]
pub struct PoolCache {
    argmax: Vec<usize>,
    in_shape: [usize; 4],
}

fn out_extent(size: usize, window: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if padded < window || window == 0 {
        return None;
    }
    Some((padded - window) / stride + 1)
}

pub fn pool2d(input: &Tensor, params: &PoolParams) -> Result<(Tensor, PoolCache), NnError> {
    let [n, c, h, w] = dims4(input, "pool2d", "input")?;
    let (wh, ww) = params.window;
    if params.stride == 0 {
        return Err(shape_mismatch("pool2d", "stride must be >= 1".into()));
    }
    let (oh, ow) = match (
        out_extent(h, wh, params.stride, params.padding),
        out_extent(w, ww, params.stride, params.padding),
    ) {
        (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
        _ => {
            return Err(NnError::NonPositiveOutputDim {
                op: "pool2d",
                detail: format!(
                    "input {h}x{w}, window {wh}x{ww}, stride {}, pad {}",
                    params.stride, params.padding
                ),
            })
        }
    };
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut argmax = vec![0usize; if params.mode == PoolMode::Max { n * c * oh * ow } else { 0 }];
    let pad = params.padding as isize;
    for ni in 0..n {
        for ci in 0..c {
            let plane = (ni * c + ci) * h * w;
            let out_plane = (ni * c + ci) * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let y0 = (oy * params.stride) as isize - pad;
                    let x0 = (ox * params.stride) as isize - pad;
                    match params.mode {
                        PoolMode::Max => {
                            // Padding cells never win: start below any finite
                            // value and require a strictly greater sample, so
                            // ties keep the first window element in row-major
                            // order.
                            let mut best = f64::NEG_INFINITY;
                            let mut best_idx = usize::MAX;
                            for dy in 0..wh {
                                let y = y0 + dy as isize;
                                if y < 0 || y as usize >= h {
                                    continue;
                                }
                                for dx in 0..ww {
                                    let x = x0 + dx as isize;
                                    if x < 0 || x as usize >= w {
                                        continue;
                                    }
                                    let idx = plane + y as usize * w + x as usize;
                                    if input.data[idx] > best {
                                        best = input.data[idx];
                                        best_idx = idx;
                                    }
                                }
                            }
                            if best_idx == usize::MAX {
                                return Err(NnError::NonPositiveOutputDim {
                                    op: "pool2d",
                                    detail: "max-pool window covers only padding".into(),
                                });
                            }
                            out.data[out_plane + oy * ow + ox] = best;
                            argmax[out_plane + oy * ow + ox] = best_idx;
                        }
                        PoolMode::Avg => {
                            // Average pooling divides by the full window area;
                            // with padding 0 every window lies inside.
                            let mut acc = 0.0;
                            for dy in 0..wh {
                                let y = y0 + dy as isize;
                                for dx in 0..ww {
                                    let x = x0 + dx as isize;
                                    if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                                        acc += input.data[plane + y as usize * w + x as usize];
                                    }
                                }
                            }
                            out.data[out_plane + oy * ow + ox] = acc / (wh * ww) as f64;
                        }
                    }
                }
            }
        }
    }
    Ok((
        out,
        PoolCache {
            argmax,
            in_shape: [n, c, h, w],
        },
    ))
}

pub fn pool2d_backward(
    input: &mut Tensor,
    params: &PoolParams,
    cache: &PoolCache,
    grad_out: &Tensor,
) -> Result<(), NnError> {
    let [n, c, h, w] = dims4(input, "pool2d_backward", "input")?;
    if cache.in_shape != [n, c, h, w] {
        return Err(shape_mismatch(
            "pool2d_backward",
            "cache was built for a different input shape".into(),
        ));
    }
    let [gn, gc, oh, ow] = dims4(grad_out, "pool2d_backward", "upstream gradient")?;
    if gn != n || gc != c {
        return Err(shape_mismatch(
            "pool2d_backward",
            "upstream gradient batch/channel mismatch".into(),
        ));
    }
    let grad = input.grad_mut();
    match params.mode {
        PoolMode::Max => {
            if cache.argmax.len() != grad_out.data.len() {
                return Err(shape_mismatch(
                    "pool2d_backward",
                    "cache does not match upstream gradient size".into(),
                ));
            }
            for (i, &g) in grad_out.data.iter().enumerate() {
                grad[cache.argmax[i]] += g;
            }
        }
        PoolMode::Avg => {
            let (wh, ww) = params.window;
            let area = (wh * ww) as f64;
            let pad = params.padding as isize;
            for ni in 0..n {
                for ci in 0..c {
                    let plane = (ni * c + ci) * h * w;
                    let out_plane = (ni * c + ci) * oh * ow;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = grad_out.data[out_plane + oy * ow + ox] / area;
                            let y0 = (oy * params.stride) as isize - pad;
                            let x0 = (ox * params.stride) as isize - pad;
                            for dy in 0..wh {
                                let y = y0 + dy as isize;
                                for dx in 0..ww {
                                    let x = x0 + dx as isize;
                                    if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                                        grad[plane + y as usize * w + x as usize] += g;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(())
}
