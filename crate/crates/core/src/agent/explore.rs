use rand::Rng;

/// Standard Gumbel draw.
pub fn gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    -(-u.ln()).ln()
}

pub fn gumbel_vec<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| gumbel(rng)).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

/// Exact draw from `softmax(logits / temperature)` via the Gumbel-max trick.
pub fn sample_softmax<R: Rng + ?Sized>(logits: &[f64], temperature: f64, rng: &mut R) -> usize {
    let perturbed: Vec<f64> = logits.iter().map(|l| l / temperature + gumbel(rng)).collect();
    argmax(&perturbed)
}

pub fn one_hot(i: usize, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

/// Linear interpolation from `start` to `end` over `span` ticks, then flat.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearSchedule {
    pub start: f64,
    pub end: f64,
    pub span: u64,
}

impl LinearSchedule {
    pub fn new(start: f64, end: f64, span: u64) -> Self {
        LinearSchedule { start, end, span }
    }

    pub fn at(&self, t: u64) -> f64 {
        if self.span == 0 || t >= self.span {
            return self.end;
        }
        self.start + (self.end - self.start) * t as f64 / self.span as f64
    }
}
