//! Uniformly sampled past of a few signals, kept in a ring buffer.

/// Samples `k = 0, 1, ...` at `t_k = k·dt` of `W` signals. Times before zero
/// read the initial values; lookups interpolate linearly between samples.
#[derive(Debug, Clone)]
pub(crate) struct History<const W: usize> {
    dt: f64,
    initial: [f64; W],
    buf: Vec<[f64; W]>,
    /// Number of samples pushed so far.
    len: usize,
}

impl<const W: usize> History<W> {
    /// `span` is the longest lag that will ever be requested, seconds.
    pub fn new(dt: f64, span: f64, initial: [f64; W]) -> Self {
        let cap = (span / dt).ceil() as usize + 4;
        Self { dt, initial, buf: vec![initial; cap], len: 0 }
    }

    pub fn push(&mut self, sample: [f64; W]) {
        let cap = self.buf.len();
        self.buf[self.len % cap] = sample;
        self.len += 1;
    }

    fn sample(&self, k: isize) -> [f64; W] {
        if k < 0 {
            return self.initial;
        }
        let k = k as usize;
        debug_assert!(k < self.len && k + self.buf.len() >= self.len, "history lookup out of range");
        self.buf[k % self.buf.len()]
    }

    /// Values at time `t`, which must not be later than the newest sample.
    pub fn at(&self, t: f64) -> [f64; W] {
        if t <= 0.0 {
            return self.initial;
        }
        let x = t / self.dt;
        let k = x.floor() as isize;
        let frac = x - k as f64;
        let lo = self.sample(k);
        if frac == 0.0 {
            return lo;
        }
        let hi = self.sample(k + 1);
        let mut out = [0.0; W];
        for i in 0..W {
            out[i] = lo[i] + frac * (hi[i] - lo[i]);
        }
        out
    }
}
