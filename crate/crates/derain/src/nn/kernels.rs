//! Hot loops for 3x3 stride-1 same-padding convolution, forward and
//! backward, on f64 planes.
//!
//! Inputs are staged into spatially zero-padded scratch planes
//! ((H+2) x (W+2), content at offset (1,1)) so the accumulation loops are
//! branch-free; one output row is accumulated in a 32-wide register tile
//! across all taps and input channels before being stored once. That layout
//! is what lets a single core sustain the training-budget arithmetic.
//! Every sum here runs in a fixed order, so results are bit-reproducible.

pub const TILE: usize = 32;

/// acc[x] += k0*r[x] + k1*r[x+1] + k2*r[x+2] over a full tile.
#[inline(always)]
fn tap3_tile(acc: &mut [f64; TILE], r: &[f64], k0: f64, k1: f64, k2: f64) {
    let r = &r[..TILE + 2];
    for x in 0..TILE {
        acc[x] += k0 * r[x] + k1 * r[x + 1] + k2 * r[x + 2];
    }
}

/// Same as [`tap3_tile`] for a trailing partial tile.
#[inline(always)]
fn tap3_rem(acc: &mut [f64], r: &[f64], k0: f64, k1: f64, k2: f64) {
    for x in 0..acc.len() {
        acc[x] += k0 * r[x] + k1 * r[x + 1] + k2 * r[x + 2];
    }
}

/// Copies one H x W plane into the content region of a padded plane whose
/// border is already zero.
pub fn pad_plane(src: &[f64], h: usize, w: usize, dst: &mut [f64]) {
    let pw = w + 2;
    debug_assert_eq!(src.len(), h * w);
    debug_assert_eq!(dst.len(), (h + 2) * pw);
    for y in 0..h {
        dst[(y + 1) * pw + 1..(y + 1) * pw + 1 + w].copy_from_slice(&src[y * w..y * w + w]);
    }
}

/// Forward convolution for one image: `out[o] = bias[o] + sum_i w[o][i] * pad[i]`.
///
/// `pad` holds `cin` padded planes; `wts` is `[oc][cin][3][3]` row-major;
/// `out` is `[oc][h][w]`.
pub fn conv_fwd(pad: &[f64], cin: usize, h: usize, w: usize, wts: &[f64], bias: &[f64], oc: usize, out: &mut [f64]) {
    let pw = w + 2;
    let pp = (h + 2) * pw;
    for o in 0..oc {
        let wrow = &wts[o * cin * 9..(o + 1) * cin * 9];
        for y in 0..h {
            let orow = &mut out[(o * h + y) * w..(o * h + y) * w + w];
            let mut x0 = 0;
            while x0 + TILE <= w {
                let mut acc = [0.0f64; TILE];
                for i in 0..cin {
                    let k = &wrow[i * 9..i * 9 + 9];
                    let base = i * pp + y * pw + x0;
                    tap3_tile(&mut acc, &pad[base..], k[0], k[1], k[2]);
                    tap3_tile(&mut acc, &pad[base + pw..], k[3], k[4], k[5]);
                    tap3_tile(&mut acc, &pad[base + 2 * pw..], k[6], k[7], k[8]);
                }
                let b = bias[o];
                for x in 0..TILE {
                    orow[x0 + x] = acc[x] + b;
                }
                x0 += TILE;
            }
            if x0 < w {
                let rem = w - x0;
                let mut accbuf = [0.0f64; TILE];
                let acc = &mut accbuf[..rem];
                for i in 0..cin {
                    let k = &wrow[i * 9..i * 9 + 9];
                    let base = i * pp + y * pw + x0;
                    tap3_rem(acc, &pad[base..base + rem + 2], k[0], k[1], k[2]);
                    tap3_rem(acc, &pad[base + pw..base + pw + rem + 2], k[3], k[4], k[5]);
                    tap3_rem(acc, &pad[base + 2 * pw..base + 2 * pw + rem + 2], k[6], k[7], k[8]);
                }
                let b = bias[o];
                for x in 0..rem {
                    orow[x0 + x] = acc[x] + b;
                }
            }
        }
    }
}

/// Input-gradient convolution for one image and one global input channel:
/// `dplane[y][x] += sum_o sum_k flip(w[o][i]) * pad_g[o]`.
///
/// `pad_g` holds `oc` padded output-gradient planes; the result is
/// accumulated (not overwritten) into `dplane`.
pub fn conv_bwd_input_plane(
    pad_g: &[f64],
    oc: usize,
    cin: usize,
    i: usize,
    h: usize,
    w: usize,
    wts: &[f64],
    dplane: &mut [f64],
) {
    let pw = w + 2;
    let pp = (h + 2) * pw;
    for y in 0..h {
        let drow = &mut dplane[y * w..y * w + w];
        let mut x0 = 0;
        while x0 + TILE <= w {
            let mut acc = [0.0f64; TILE];
            for o in 0..oc {
                let k = &wts[(o * cin + i) * 9..(o * cin + i) * 9 + 9];
                let base = o * pp + y * pw + x0;
                // flipped taps: padded row offset ry pairs with weight row 2-ry
                tap3_tile(&mut acc, &pad_g[base..], k[8], k[7], k[6]);
                tap3_tile(&mut acc, &pad_g[base + pw..], k[5], k[4], k[3]);
                tap3_tile(&mut acc, &pad_g[base + 2 * pw..], k[2], k[1], k[0]);
            }
            for x in 0..TILE {
                drow[x0 + x] += acc[x];
            }
            x0 += TILE;
        }
        if x0 < w {
            let rem = w - x0;
            let mut accbuf = [0.0f64; TILE];
            let acc = &mut accbuf[..rem];
            for o in 0..oc {
                let k = &wts[(o * cin + i) * 9..(o * cin + i) * 9 + 9];
                let base = o * pp + y * pw + x0;
                tap3_rem(acc, &pad_g[base..base + rem + 2], k[8], k[7], k[6]);
                tap3_rem(acc, &pad_g[base + pw..base + pw + rem + 2], k[5], k[4], k[3]);
                tap3_rem(acc, &pad_g[base + 2 * pw..base + 2 * pw + rem + 2], k[2], k[1], k[0]);
            }
            for x in 0..rem {
                drow[x0 + x] += acc[x];
            }
        }
    }
}

/// Weight/bias gradients for one image, accumulated into `dw`/`db`:
/// `dw[o][i][ky][kx] += sum_{y,x} dout[o][y][x] * pad_in[i][y+ky][x+kx]`.
///
/// Per (o, i, ky) three tile accumulators run over all rows and are
/// horizontally summed once at the end, keeping both vector throughput and
/// a fixed summation order.
pub fn conv_bwd_weights(
    pad_in: &[f64],
    cin: usize,
    dout: &[f64],
    oc: usize,
    h: usize,
    w: usize,
    dw: &mut [f64],
    db: &mut [f64],
) {
    let pw = w + 2;
    let pp = (h + 2) * pw;
    for o in 0..oc {
        let gplane = &dout[o * h * w..(o + 1) * h * w];
        for i in 0..cin {
            let iplane = &pad_in[i * pp..(i + 1) * pp];
            let dwk = &mut dw[(o * cin + i) * 9..(o * cin + i) * 9 + 9];
            for ky in 0..3 {
                let mut a0 = [0.0f64; TILE];
                let mut a1 = [0.0f64; TILE];
                let mut a2 = [0.0f64; TILE];
                for y in 0..h {
                    let g = &gplane[y * w..y * w + w];
                    let r = &iplane[(y + ky) * pw..(y + ky) * pw + pw];
                    let mut x0 = 0;
                    while x0 + TILE <= w {
                        let gs = &g[x0..x0 + TILE];
                        let rs = &r[x0..x0 + TILE + 2];
                        for x in 0..TILE {
                            a0[x] += gs[x] * rs[x];
                            a1[x] += gs[x] * rs[x + 1];
                            a2[x] += gs[x] * rs[x + 2];
                        }
                        x0 += TILE;
                    }
                    if x0 < w {
                        let rem = w - x0;
                        let gs = &g[x0..x0 + rem];
                        let rs = &r[x0..x0 + rem + 2];
                        for x in 0..rem {
                            a0[x] += gs[x] * rs[x];
                            a1[x] += gs[x] * rs[x + 1];
                            a2[x] += gs[x] * rs[x + 2];
                        }
                    }
                }
                dwk[ky * 3] += a0.iter().sum::<f64>();
                dwk[ky * 3 + 1] += a1.iter().sum::<f64>();
                dwk[ky * 3 + 2] += a2.iter().sum::<f64>();
            }
        }
        db[o] += gplane.iter().sum::<f64>();
    }
}
