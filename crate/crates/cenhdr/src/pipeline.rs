//! Everything between image files and model tensors: gamma projection of the
//! LDR frames into the HDR domain, six-channel input assembly, μ-law tone
//! mapping, and the reflection padding that makes odd-sized photos fit the
//! stride-2 encoder.

use thiserror::Error;

use crate::ops;
use crate::tensor::{Shape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("raster data length {got} does not match {width}x{height} RGB ({expected})")]
    RasterLength { width: usize, height: usize, expected: usize, got: usize },
    #[error("exposure time must be positive, got {t}")]
    NonPositiveExposure { t: f64 },
    #[error("exposure values must be strictly increasing, got {evs:?}")]
    EvNotIncreasing { evs: [f64; 3] },
    #[error("{what} is {got_w}x{got_h} but the bracket frames are {want_w}x{want_h}")]
    SizeMismatch { what: &'static str, want_w: usize, want_h: usize, got_w: usize, got_h: usize },
    #[error("negative value {value} in linear HDR data")]
    NegativeValue { value: f32 },
    #[error("expected a (1, 3, h, w) tensor, got {shape}")]
    NotAnImageTensor { shape: Shape },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// A float RGB image, interleaved row-major.
#[derive(Clone, PartialEq)]
pub struct Raster {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl std::fmt::Debug for Raster {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Raster({}x{})", self.width, self.height)
    }
}

impl Raster {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self, PipelineError> {
        let expected = width * height * 3;
        if data.len() != expected {
            return Err(PipelineError::RasterLength { width, height, expected, got: data.len() });
        }
        Ok(Raster { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Raster { width, height, data: vec![value; width * height * 3] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                for ch in 0..3 {
                    data.push(f(x, y, ch));
                }
            }
        }
        Raster { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, ch: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + ch]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Raster {
        Raster {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Mirrors the image left-right.
    pub fn flip_horizontal(&self) -> Raster {
        Raster::from_fn(self.width, self.height, |x, y, ch| {
            self.get(self.width - 1 - x, y, ch)
        })
    }

    /// Rotates by `quarter_turns * 90` degrees counter-clockwise.
    pub fn rotate90(&self, quarter_turns: usize) -> Raster {
        match quarter_turns % 4 {
            0 => self.clone(),
            1 => Raster::from_fn(self.height, self.width, |x, y, ch| {
                self.get(self.width - 1 - y, x, ch)
            }),
            2 => Raster::from_fn(self.width, self.height, |x, y, ch| {
                self.get(self.width - 1 - x, self.height - 1 - y, ch)
            }),
            _ => Raster::from_fn(self.height, self.width, |x, y, ch| {
                self.get(y, self.height - 1 - x, ch)
            }),
        }
    }

    /// Crops a window; the window must lie inside the image.
    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Raster {
        Raster::from_fn(width, height, |x, y, ch| self.get(x0 + x, y0 + y, ch))
    }
}

/// Mirror-reflected index (no edge repetition except for extent 1).
fn mirror(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let j = i % period;
    if j < n {
        j
    } else {
        period - j
    }
}

/// Reflection-pads to at least the requested size (bottom/right).
pub fn reflect_pad(r: &Raster, width: usize, height: usize) -> Raster {
    if width <= r.width() && height <= r.height() {
        return r.clone();
    }
    let (w, h) = (width.max(r.width()), height.max(r.height()));
    Raster::from_fn(w, h, |x, y, ch| r.get(mirror(x, r.width()), mirror(y, r.height()), ch))
}

/// Three LDR frames with exposure times and optional supervision targets.
/// The middle frame is the reference the output is aligned to.
#[derive(Clone, Debug)]
pub struct ExposureBracket {
    pub ldr: [Raster; 3],
    pub exposure_times: [f64; 3],
    pub gt_hdr: Option<Raster>,
    pub teacher_hdr: Option<Raster>,
}

impl ExposureBracket {
    pub const REFERENCE_INDEX: usize = 1;

    /// Builds a bracket from per-frame exposure values; `t_i = 2^EV_i`.
    pub fn from_evs(ldr: [Raster; 3], evs: [f64; 3]) -> Result<Self, PipelineError> {
        if !(evs[0] < evs[1] && evs[1] < evs[2]) {
            return Err(PipelineError::EvNotIncreasing { evs });
        }
        let (w, h) = (ldr[0].width(), ldr[0].height());
        for frame in &ldr[1..] {
            if frame.width() != w || frame.height() != h {
                return Err(PipelineError::SizeMismatch {
                    what: "bracket frame",
                    want_w: w,
                    want_h: h,
                    got_w: frame.width(),
                    got_h: frame.height(),
                });
            }
        }
        let exposure_times = [evs[0].exp2(), evs[1].exp2(), evs[2].exp2()];
        for &t in &exposure_times {
            if t <= 0.0 {
                return Err(PipelineError::NonPositiveExposure { t });
            }
        }
        Ok(ExposureBracket { ldr, exposure_times, gt_hdr: None, teacher_hdr: None })
    }

    pub fn width(&self) -> usize {
        self.ldr[0].width()
    }

    pub fn height(&self) -> usize {
        self.ldr[0].height()
    }

    pub fn with_gt(mut self, gt: Raster) -> Result<Self, PipelineError> {
        self.check_size("ground truth", &gt)?;
        self.gt_hdr = Some(gt);
        Ok(self)
    }

    pub fn with_teacher(mut self, teacher: Raster) -> Result<Self, PipelineError> {
        self.check_size("teacher prediction", &teacher)?;
        self.teacher_hdr = Some(teacher);
        Ok(self)
    }

    fn check_size(&self, what: &'static str, r: &Raster) -> Result<(), PipelineError> {
        if r.width() != self.width() || r.height() != self.height() {
            return Err(PipelineError::SizeMismatch {
                what,
                want_w: self.width(),
                want_h: self.height(),
                got_w: r.width(),
                got_h: r.height(),
            });
        }
        Ok(())
    }
}

/// Projects one LDR frame into the HDR domain: `H = I^gamma / t`.
pub fn gamma_project(ldr: &Raster, t: f64, gamma: f64) -> Result<Raster, PipelineError> {
    if t <= 0.0 {
        return Err(PipelineError::NonPositiveExposure { t });
    }
    Ok(ldr.map(|v| ((v as f64).powf(gamma) / t) as f32))
}

/// μ-law range compression of a non-negative raster.
pub fn mu_law(hdr: &Raster, mu: f64) -> Result<Raster, PipelineError> {
    if let Some(&value) = hdr.data().iter().find(|v| **v < 0.0) {
        return Err(PipelineError::NegativeValue { value });
    }
    Ok(hdr.map(|v| ops::mu_law_scalar(v as f64, mu) as f32))
}

/// Original extent of a padded input, kept so the network output can be
/// cropped back.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PadInfo {
    pub width: usize,
    pub height: usize,
}

/// Copies an RGB raster into a `(1, 3, h, w)` tensor.
pub fn raster_to_tensor(r: &Raster) -> Tensor {
    Tensor::from_fn(Shape::new(1, 3, r.height(), r.width()), |_, c, y, x| r.get(x, y, c))
}

/// Extracts batch element `n` of a `(n, 3, h, w)` tensor as a raster.
pub fn tensor_to_raster(t: &Tensor, n: usize) -> Result<Raster, PipelineError> {
    let s = t.shape();
    if s.c != 3 || n >= s.n {
        return Err(PipelineError::NotAnImageTensor { shape: s });
    }
    Ok(Raster::from_fn(s.w, s.h, |x, y, ch| t.at(n, ch, y, x)))
}

/// Builds the three six-channel network inputs `L_i = concat(I_i, I_i^gamma / t_i)`,
/// reflection-padding the frames up to even extents when needed. The returned
/// [`PadInfo`] crops the network output back to the photo size.
pub fn assemble_inputs(
    bracket: &ExposureBracket,
    gamma: f64,
) -> Result<([Tensor; 3], PadInfo), PipelineError> {
    let pad = PadInfo { width: bracket.width(), height: bracket.height() };
    let w = pad.width + pad.width % 2;
    let h = pad.height + pad.height % 2;

    let mut inputs = Vec::with_capacity(3);
    for i in 0..3 {
        let ldr = reflect_pad(&bracket.ldr[i], w, h);
        let hdr = gamma_project(&ldr, bracket.exposure_times[i], gamma)?;
        let mut t = Tensor::zeros(Shape::new(1, 6, h, w));
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    let ldr_idx = t.index(0, ch, y, x);
                    t.data_mut()[ldr_idx] = ldr.get(x, y, ch);
                    let hdr_idx = t.index(0, ch + 3, y, x);
                    t.data_mut()[hdr_idx] = hdr.get(x, y, ch);
                }
            }
        }
        inputs.push(t);
    }
    let [l1, l2, l3]: [Tensor; 3] = inputs.try_into().expect("three frames");
    Ok(([l1, l2, l3], pad))
}

/// Crops a `(1, 3, h, w)` network output back to the pre-padding size.
pub fn crop_output(hdr: &Tensor, pad: &PadInfo) -> Result<Raster, PipelineError> {
    let s = hdr.shape();
    if s.n != 1 || s.c != 3 || s.h < pad.height || s.w < pad.width {
        return Err(PipelineError::NotAnImageTensor { shape: s });
    }
    Ok(Raster::from_fn(pad.width, pad.height, |x, y, ch| hdr.at(0, ch, y, x)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_raster(w: usize, h: usize, phase: f32) -> Raster {
        Raster::from_fn(w, h, |x, y, ch| {
            let v = ((x * 7 + y * 13 + ch * 29) as f32 * 0.173 + phase).sin() * 0.5 + 0.5;
            v.clamp(0.0, 1.0)
        })
    }

    fn bracket(w: usize, h: usize) -> ExposureBracket {
        ExposureBracket::from_evs(
            [test_raster(w, h, 0.1), test_raster(w, h, 0.2), test_raster(w, h, 0.3)],
            [-2.0, 0.0, 2.0],
        )
        .unwrap()
    }

    #[test]
    fn gamma_endpoints_and_oracle_values() {
        let zero = Raster::filled(2, 2, 0.0);
        assert!(gamma_project(&zero, 1.0, 2.2).unwrap().data().iter().all(|&v| v == 0.0));
        let one = Raster::filled(2, 2, 1.0);
        assert!(gamma_project(&one, 1.0, 2.2).unwrap().data().iter().all(|&v| v == 1.0));

        let half = Raster::filled(1, 1, 0.5);
        let v = gamma_project(&half, 1.0, 2.2).unwrap().data()[0];
        assert!((v - 0.21764).abs() <= 1e-5, "got {v}");

        let quarter = Raster::filled(1, 1, 0.25);
        let v = gamma_project(&quarter, 0.5, 2.2).unwrap().data()[0];
        assert!((v - 0.09473).abs() <= 1e-5, "got {v}");

        assert!(matches!(
            gamma_project(&half, 0.0, 2.2),
            Err(PipelineError::NonPositiveExposure { .. })
        ));
    }

    #[test]
    fn gamma_monotonicity() {
        // increasing in I at fixed t, decreasing in t at fixed I
        let mut prev = -1.0f32;
        for i in 0..32 {
            let v = (i as f32 + 0.5) / 32.0;
            let p = gamma_project(&Raster::filled(1, 1, v), 1.3, 2.2).unwrap().data()[0];
            assert!(p > prev);
            prev = p;
        }
        let i = Raster::filled(1, 1, 0.6);
        let mut prev = f32::INFINITY;
        for k in 1..10 {
            let p = gamma_project(&i, k as f64 * 0.5, 2.2).unwrap().data()[0];
            assert!(p < prev);
            prev = p;
        }
    }

    #[test]
    fn bracket_validation() {
        let r = test_raster(4, 4, 0.0);
        let bad_ev = ExposureBracket::from_evs(
            [r.clone(), r.clone(), r.clone()],
            [0.0, 0.0, 2.0],
        );
        assert!(matches!(bad_ev, Err(PipelineError::EvNotIncreasing { .. })));

        let mismatched = ExposureBracket::from_evs(
            [r.clone(), test_raster(5, 4, 0.0), r.clone()],
            [-2.0, 0.0, 2.0],
        );
        assert!(matches!(mismatched, Err(PipelineError::SizeMismatch { .. })));

        let b = bracket(4, 4);
        assert_eq!(b.exposure_times, [0.25, 1.0, 4.0]);
        assert!(b.with_gt(test_raster(3, 4, 0.5)).is_err());
    }

    #[test]
    fn assemble_shapes_and_channel_content() {
        let b = bracket(8, 6);
        let ([l1, _, l3], pad) = assemble_inputs(&b, 2.2).unwrap();
        assert_eq!(l1.shape(), Shape::new(1, 6, 6, 8));
        assert_eq!(pad, PadInfo { width: 8, height: 6 });

        // channels 0..3 are the LDR, channels 3..6 its gamma projection
        for y in 0..6 {
            for x in 0..8 {
                for ch in 0..3 {
                    assert_eq!(l1.at(0, ch, y, x), b.ldr[0].get(x, y, ch));
                    let expect =
                        ((b.ldr[0].get(x, y, ch) as f64).powf(2.2) / 0.25) as f32;
                    assert!((l1.at(0, ch + 3, y, x) - expect).abs() <= 1e-6);
                    let expect3 = ((b.ldr[2].get(x, y, ch) as f64).powf(2.2) / 4.0) as f32;
                    assert!((l3.at(0, ch + 3, y, x) - expect3).abs() <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn odd_sizes_are_padded_and_cropped_back() {
        let b = bracket(7, 5);
        let ([l1, _, _], pad) = assemble_inputs(&b, 2.2).unwrap();
        assert_eq!(l1.shape(), Shape::new(1, 6, 6, 8));
        assert_eq!(pad, PadInfo { width: 7, height: 5 });

        // padded column mirrors the interior, not the edge
        assert_eq!(l1.at(0, 0, 0, 7), b.ldr[0].get(5, 0, 0));
        assert_eq!(l1.at(0, 1, 5, 2), b.ldr[0].get(2, 3, 1));

        let fake_out = Tensor::from_fn(Shape::new(1, 3, 6, 8), |_, c, y, x| {
            (c * 100 + y * 10 + x) as f32
        });
        let cropped = crop_output(&fake_out, &pad).unwrap();
        assert_eq!(cropped.width(), 7);
        assert_eq!(cropped.height(), 5);
        assert_eq!(cropped.get(6, 4, 2), fake_out.at(0, 2, 4, 6));
    }

    #[test]
    fn raster_tensor_round_trip() {
        let r = test_raster(5, 4, 0.7);
        let t = raster_to_tensor(&r);
        assert_eq!(t.shape(), Shape::new(1, 3, 4, 5));
        let back = tensor_to_raster(&t, 0).unwrap();
        assert_eq!(r.data(), back.data());
    }

    #[test]
    fn mu_law_raster_endpoints() {
        let r = Raster::new(1, 1, vec![0.0, 0.01, 1.0]).unwrap();
        let t = mu_law(&r, 5000.0).unwrap();
        assert_eq!(t.data()[0], 0.0);
        assert!((t.data()[1] - 0.46163).abs() <= 1e-5);
        assert!((t.data()[2] - 1.0).abs() <= 1e-6);
        let neg = Raster::new(1, 1, vec![-0.5, 0.0, 0.0]).unwrap();
        assert!(matches!(mu_law(&neg, 5000.0), Err(PipelineError::NegativeValue { .. })));
    }

    #[test]
    fn flips_and_rotations() {
        let r = test_raster(4, 4, 0.2);
        assert_eq!(r.flip_horizontal().flip_horizontal().data(), r.data());
        assert_eq!(r.rotate90(2).rotate90(2).data(), r.data());
        assert_eq!(r.rotate90(1).rotate90(3).data(), r.data());
        // multiset of values is preserved
        let mut a: Vec<u32> = r.data().iter().map(|v| v.to_bits()).collect();
        let mut b: Vec<u32> = r.rotate90(1).data().iter().map(|v| v.to_bits()).collect();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
    }
}
