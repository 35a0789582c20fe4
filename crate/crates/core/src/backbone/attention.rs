//! Windowed multi-head self-attention over `[B, T, H, W, C]` features.
//!
//! Features are split into non-overlapping `N × M × M` windows (clamped to
//! the feature extent). Shifted blocks roll the grid by half a window along
//! every axis that is larger than its window, and an additive mask keeps
//! tokens that were not neighbours before the roll from attending to each
//! other. Grids that are not a multiple of the window are zero padded; the
//! padded positions are masked out as keys and cropped afterwards.

use candle_core::Tensor;

use crate::error::Result;
use crate::nn::{softmax_last, tensor_like, LayerNorm, Linear};
use crate::params::{Init, ParamStore};

/// Large negative logit used for masked pairs.
pub const MASK_VALUE: f64 = -1e9;

/// Effective window, shift and padded extent of one block application.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowGeometry {
    pub window: [usize; 3],
    pub shift: [usize; 3],
    pub padded: [usize; 3],
    pub dims: [usize; 3],
}

impl WindowGeometry {
    /// `window` is the configured (N, M); `dims` the feature (T, H, W).
    pub fn new(window: [usize; 2], dims: [usize; 3], shifted: bool) -> Self {
        let cfg = [window[0], window[1], window[1]];
        let mut win = [0; 3];
        let mut shift = [0; 3];
        let mut padded = [0; 3];
        for a in 0..3 {
            win[a] = cfg[a].min(dims[a]);
            shift[a] = if shifted && dims[a] > cfg[a] { win[a] / 2 } else { 0 };
            padded[a] = dims[a].div_ceil(win[a]) * win[a];
        }
        Self {
            window: win,
            shift,
            padded,
            dims,
        }
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window.iter().product()
    }

    pub fn num_windows(&self) -> usize {
        (0..3).map(|a| self.padded[a] / self.window[a]).product()
    }

    pub fn needs_mask(&self) -> bool {
        self.shift.iter().any(|&s| s > 0) || self.padded != self.dims
    }

    /// Region label of a coordinate in the rolled, padded grid along `axis`.
    fn region(&self, axis: usize, p: usize) -> usize {
        let (s, w, n) = (self.shift[axis], self.window[axis], self.padded[axis]);
        if s == 0 {
            0
        } else if p < n - w {
            0
        } else if p < n - s {
            1
        } else {
            2
        }
    }

    /// Whether a coordinate of the rolled, padded grid is a real feature.
    fn valid(&self, axis: usize, p: usize) -> bool {
        (p + self.shift[axis]) % self.padded[axis] < self.dims[axis]
    }

    /// Additive mask `[num_windows, n, n]` in window-partition order.
    pub fn mask(&self) -> Vec<f64> {
        let [wt, wh, ww] = self.window;
        let [nt, nh, nw] = [
            self.padded[0] / wt,
            self.padded[1] / wh,
            self.padded[2] / ww,
        ];
        let n = wt * wh * ww;
        let mut out = Vec::with_capacity(nt * nh * nw * n * n);
        let mut labels = Vec::with_capacity(n);
        for it in 0..nt {
            for ih in 0..nh {
                for iw in 0..nw {
                    labels.clear();
                    for t in 0..wt {
                        for h in 0..wh {
                            for w in 0..ww {
                                let (pt, ph, pw) = (it * wt + t, ih * wh + h, iw * ww + w);
                                let region = (self.region(0, pt), self.region(1, ph), self.region(2, pw));
                                let valid = self.valid(0, pt) && self.valid(1, ph) && self.valid(2, pw);
                                labels.push((region, valid));
                            }
                        }
                    }
                    for i in 0..n {
                        for j in 0..n {
                            let ok = labels[i].0 == labels[j].0 && labels[j].1;
                            out.push(if ok { 0.0 } else { MASK_VALUE });
                        }
                    }
                }
            }
        }
        out
    }
}

/// Index into the relative-position table for every token pair of a
/// `window` block, given the configured maximum window `(N, M)`.
pub fn relative_position_index(window: [usize; 3], max_window: [usize; 2]) -> Vec<u32> {
    let [wt, wh, ww] = window;
    let (n_t, m) = (max_window[0], max_window[1]);
    let coords: Vec<(usize, usize, usize)> = (0..wt)
        .flat_map(|t| (0..wh).flat_map(move |h| (0..ww).map(move |w| (t, h, w))))
        .collect();
    let span = 2 * m - 1;
    let mut idx = Vec::with_capacity(coords.len() * coords.len());
    for &(ti, hi, wi) in &coords {
        for &(tj, hj, wj) in &coords {
            let dt = ti + n_t - 1 - tj;
            let dh = hi + m - 1 - hj;
            let dw = wi + m - 1 - wj;
            idx.push(((dt * span + dh) * span + dw) as u32);
        }
    }
    idx
}

#[derive(Debug, Clone)]
pub struct WindowAttention {
    pub qkv: Linear,
    pub proj: Linear,
    /// `[(2N-1)(2M-1)(2M-1), heads]`
    pub bias_table: Tensor,
    pub heads: usize,
    pub max_window: [usize; 2],
}

impl WindowAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, window: [usize; 2]) -> Result<Self> {
        let entries = (2 * window[0] - 1) * (2 * window[1] - 1) * (2 * window[1] - 1);
        Ok(Self {
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, true)?,
            proj: Linear::new(store, &format!("{name}.proj"), dim, dim, true)?,
            bias_table: store.param(&format!("{name}.relative_position_bias_table"), &[entries, heads], Init::TruncNormal(0.02))?,
            heads,
            max_window: window,
        })
    }

    /// `x`: `[B * nW, n, C]` windows; `mask`: `[nW, n, n]`.
    pub fn forward(&self, x: &Tensor, window: [usize; 3], mask: Option<&Tensor>) -> Result<Tensor> {
        let (bw, n, c) = x.dims3()?;
        let hd = c / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((bw, n, 3, self.heads, hd))?
            .permute([2, 0, 3, 1, 4])?;
        let q = (qkv.get(0)?.contiguous()? * (hd as f64).powf(-0.5))?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let mut attn = q.matmul(&k.t()?)?;
        let index = relative_position_index(window, self.max_window);
        let index = Tensor::from_vec(index, n * n, x.device())?;
        let bias = self
            .bias_table
            .index_select(&index, 0)?
            .reshape((n, n, self.heads))?
            .permute([2, 0, 1])?;
        attn = attn.broadcast_add(&bias)?;
        if let Some(mask) = mask {
            let nw = mask.dims()[0];
            attn = attn
                .reshape((bw / nw, nw, self.heads, n, n))?
                .broadcast_add(&mask.unsqueeze(1)?.unsqueeze(0)?)?
                .reshape((bw, self.heads, n, n))?;
        }
        let attn = softmax_last(&attn)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.reshape((bw, n, c))?;
        self.proj.forward(&out)
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu_erf()?)
    }
}

/// Pre-norm transformer block with (shifted) window attention.
#[derive(Debug, Clone)]
pub struct SwinBlock {
    pub norm1: LayerNorm,
    pub attn: WindowAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub window: [usize; 2],
    pub shifted: bool,
}

impl SwinBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        window: [usize; 2],
        mlp_ratio: usize,
        shifted: bool,
    ) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim)?,
            attn: WindowAttention::new(store, &format!("{name}.attn"), dim, heads, window)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim)?,
            mlp: Mlp {
                fc1: Linear::new(store, &format!("{name}.mlp.fc1"), dim, mlp_ratio * dim, true)?,
                fc2: Linear::new(store, &format!("{name}.mlp.fc2"), mlp_ratio * dim, dim, true)?,
            },
            window,
            shifted,
        })
    }

    pub fn geometry(&self, dims: [usize; 3]) -> WindowGeometry {
        WindowGeometry::new(self.window, dims, self.shifted)
    }

    /// `[B, T, H, W, C]` → same shape.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, h, w, c) = x.dims5()?;
        let geo = self.geometry([t, h, w]);
        let mut y = self.norm1.forward(x)?;
        for a in 0..3 {
            let pad = geo.padded[a] - geo.dims[a];
            if pad > 0 {
                y = y.pad_with_zeros(a + 1, 0, pad)?;
            }
        }
        for a in 0..3 {
            if geo.shift[a] > 0 {
                y = y.roll(-(geo.shift[a] as i32), a + 1)?;
            }
        }
        let windows = partition(&y, geo.window)?;
        let mask = if geo.needs_mask() {
            Some(tensor_like(
                geo.mask(),
                &[geo.num_windows(), geo.tokens_per_window(), geo.tokens_per_window()],
                x,
            )?)
        } else {
            None
        };
        let attended = self.attn.forward(&windows, geo.window, mask.as_ref())?;
        let mut y = merge(&attended, b, geo.padded, geo.window, c)?;
        for a in 0..3 {
            if geo.shift[a] > 0 {
                y = y.roll(geo.shift[a] as i32, a + 1)?;
            }
        }
        if geo.padded != geo.dims {
            y = y.narrow(1, 0, t)?.narrow(2, 0, h)?.narrow(3, 0, w)?;
        }
        let x = (x + y)?;
        let out = (&x + self.mlp.forward(&self.norm2.forward(&x)?)?)?;
        Ok(out)
    }
}

/// `[B, T, H, W, C]` → `[B * nW, n, C]`, windows ordered by (b, t, h, w).
pub fn partition(x: &Tensor, window: [usize; 3]) -> Result<Tensor> {
    let (b, t, h, w, c) = x.dims5()?;
    let [wt, wh, ww] = window;
    Ok(x.reshape(vec![b, t / wt, wt, h / wh, wh, w / ww, ww, c])?
        .permute([0, 1, 3, 5, 2, 4, 6, 7])?
        .contiguous()?
        .reshape((b * (t / wt) * (h / wh) * (w / ww), wt * wh * ww, c))?)
}

/// Inverse of [`partition`].
pub fn merge(x: &Tensor, b: usize, padded: [usize; 3], window: [usize; 3], c: usize) -> Result<Tensor> {
    let [t, h, w] = padded;
    let [wt, wh, ww] = window;
    Ok(x.reshape(vec![b, t / wt, h / wh, w / ww, wt, wh, ww, c])?
        .permute([0, 1, 4, 2, 5, 3, 6, 7])?
        .contiguous()?
        .reshape(vec![b, t, h, w, c])?)
}
