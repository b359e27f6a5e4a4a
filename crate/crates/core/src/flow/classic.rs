//! Bundled reference estimator: Gaussian pyramid with iterative dense
//! Lucas-Kanade refinement and backward warping between levels.

use super::{warp_frame, FlowError, FlowEstimator, FlowField};
use crate::filters::blur_plane;
use crate::media::Frame;
use crate::scalar::Scalar;

/// Coarse-to-fine dense flow. Levels are capped so the coarsest side stays
/// at or above 8 pixels.
#[derive(Debug, Clone)]
pub struct ClassicFlow {
    pub levels: usize,
    pub iterations: usize,
    pub window: usize,
    /// Tikhonov term added to the structure tensor diagonal.
    pub regularization: f64,
}

impl Default for ClassicFlow {
    fn default() -> Self {
        Self { levels: 4, iterations: 3, window: 5, regularization: 1e-4 }
    }
}

struct Plane<S> {
    h: usize,
    w: usize,
    data: Vec<S>,
}

impl<S: Scalar> Plane<S> {
    fn from_frame(frame: &Frame<S>) -> Self {
        let gray = frame.channel_mean();
        Self { h: gray.h(), w: gray.w(), data: gray.data().to_vec() }
    }

    #[inline]
    fn get(&self, y: usize, x: usize) -> S {
        self.data[y * self.w + x]
    }

    fn half(&self) -> Plane<S> {
        let blurred = blur_plane(&self.data, self.h, self.w, 1.0);
        let (h2, w2) = (self.h / 2, self.w / 2);
        let mut data = Vec::with_capacity(h2 * w2);
        for y in 0..h2 {
            for x in 0..w2 {
                data.push(blurred[(2 * y) * self.w + 2 * x]);
            }
        }
        Plane { h: h2, w: w2, data }
    }
}

impl ClassicFlow {
    fn level_count(&self, h: usize, w: usize) -> usize {
        let mut n = 1;
        let (mut h, mut w) = (h, w);
        while n < self.levels && h / 2 >= 8 && w / 2 >= 8 {
            h /= 2;
            w /= 2;
            n += 1;
        }
        n
    }
}

impl<S: Scalar> FlowEstimator<S> for ClassicFlow {
    fn estimate(&self, a: &Frame<S>, b: &Frame<S>) -> Result<FlowField<S>, FlowError> {
        let pa = Plane::from_frame(a);
        let pb = Plane::from_frame(b);
        if (pa.h, pa.w) != (pb.h, pb.w) {
            return Err(FlowError::ShapeMismatch(format!(
                "{}x{} vs {}x{}",
                pa.h, pa.w, pb.h, pb.w
            )));
        }
        let n_levels = self.level_count(pa.h, pa.w);
        let mut pyr_a = vec![pa];
        let mut pyr_b = vec![pb];
        for _ in 1..n_levels {
            pyr_a.push(pyr_a.last().unwrap().half());
            pyr_b.push(pyr_b.last().unwrap().half());
        }

        let coarsest = pyr_a.last().unwrap();
        let mut flow = FlowField::<S>::zeros(coarsest.h, coarsest.w);
        for level in (0..n_levels).rev() {
            let la = &pyr_a[level];
            let lb = &pyr_b[level];
            if (flow.h(), flow.w()) != (la.h, la.w) {
                flow = upsample_flow(&flow, la.h, la.w);
            }
            for _ in 0..self.iterations {
                refine(la, lb, &mut flow, self.window, self.regularization);
                smooth_flow(&mut flow);
            }
        }
        Ok(flow)
    }
}

/// Bilinear x2 upsampling with displacement doubling.
fn upsample_flow<S: Scalar>(flow: &FlowField<S>, h: usize, w: usize) -> FlowField<S> {
    let (sh, sw) = (flow.h(), flow.w());
    FlowField::from_fn(h, w, |y, x| {
        let fy = ((y as f64 + 0.5) * sh as f64 / h as f64 - 0.5).clamp(0.0, (sh - 1) as f64);
        let fx = ((x as f64 + 0.5) * sw as f64 / w as f64 - 0.5).clamp(0.0, (sw - 1) as f64);
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(sh - 1), (x0 + 1).min(sw - 1));
        let (wy, wx) = (S::of(fy - y0 as f64), S::of(fx - x0 as f64));
        let sample = |c: usize| {
            let v00 = flow.data()[(y0 * sw + x0) * 2 + c];
            let v01 = flow.data()[(y0 * sw + x1) * 2 + c];
            let v10 = flow.data()[(y1 * sw + x0) * 2 + c];
            let v11 = flow.data()[(y1 * sw + x1) * 2 + c];
            let top = v00 + (v01 - v00) * wx;
            let bot = v10 + (v11 - v10) * wx;
            (top + (bot - top) * wy) * S::of(2.0)
        };
        (sample(0), sample(1))
    })
}

fn refine<S: Scalar>(a: &Plane<S>, b: &Plane<S>, flow: &mut FlowField<S>, window: usize, lambda: f64) {
    let (h, w) = (a.h, a.w);
    let frame_b = frame_of(b);
    let warped = warp_frame(&frame_b, flow).expect("shapes agree");

    // per-pixel products, then window sums
    let n = h * w;
    let mut gxx = vec![0.0f64; n];
    let mut gxy = vec![0.0f64; n];
    let mut gyy = vec![0.0f64; n];
    let mut gxt = vec![0.0f64; n];
    let mut gyt = vec![0.0f64; n];
    for y in 0..h {
        for x in 0..w {
            let xm = x.saturating_sub(1);
            let xp = (x + 1).min(w - 1);
            let ym = y.saturating_sub(1);
            let yp = (y + 1).min(h - 1);
            let ix = (warped.get(y, xp, 0).f64() - warped.get(y, xm, 0).f64()) / 2.0;
            let iy = (warped.get(yp, x, 0).f64() - warped.get(ym, x, 0).f64()) / 2.0;
            let it = warped.get(y, x, 0).f64() - a.get(y, x).f64();
            let i = y * w + x;
            gxx[i] = ix * ix;
            gxy[i] = ix * iy;
            gyy[i] = iy * iy;
            gxt[i] = ix * it;
            gyt[i] = iy * it;
        }
    }
    let r = (window / 2) as isize;
    let window_sum = |field: &[f64], y: usize, x: usize| {
        let mut acc = 0.0;
        for dy in -r..=r {
            for dx in -r..=r {
                let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                acc += field[yy * w + xx];
            }
        }
        acc
    };
    let cap = window as f64 / 2.0;
    for y in 0..h {
        for x in 0..w {
            let sxx = window_sum(&gxx, y, x) + lambda;
            let sxy = window_sum(&gxy, y, x);
            let syy = window_sum(&gyy, y, x) + lambda;
            let sxt = window_sum(&gxt, y, x);
            let syt = window_sum(&gyt, y, x);
            let det = sxx * syy - sxy * sxy;
            if det.abs() < 1e-12 {
                continue;
            }
            // solve (G + lambda I) d = -rhs; step capped at half the window
            let du = ((-sxt) * syy - sxy * (-syt)) / det;
            let dv = (sxx * (-syt) - (-sxt) * sxy) / det;
            let (du, dv) = (du.clamp(-cap, cap), dv.clamp(-cap, cap));
            let (dx, dy) = flow.get(y, x);
            flow.set(y, x, dx + S::of(du), dy + S::of(dv));
        }
    }
}

fn smooth_flow<S: Scalar>(flow: &mut FlowField<S>) {
    let (h, w) = (flow.h(), flow.w());
    let mut dx = vec![S::zero(); h * w];
    let mut dy = vec![S::zero(); h * w];
    for i in 0..h * w {
        dx[i] = flow.data()[2 * i];
        dy[i] = flow.data()[2 * i + 1];
    }
    let dx = blur_plane(&dx, h, w, 1.0);
    let dy = blur_plane(&dy, h, w, 1.0);
    for i in 0..h * w {
        flow.data_mut()[2 * i] = dx[i];
        flow.data_mut()[2 * i + 1] = dy[i];
    }
}

fn frame_of<S: Scalar>(p: &Plane<S>) -> Frame<S> {
    Frame::from_fn(p.h, p.w, 1, |y, x, _| p.get(y, x))
}
