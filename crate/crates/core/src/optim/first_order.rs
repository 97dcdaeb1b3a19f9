/// A gradient-only update rule over flat vectors.
pub trait UpdateRule {
    fn name(&self) -> &'static str;

    fn update(&mut self, w: &mut [f64], g: &[f64]);
}

/// Heavy-ball momentum: `v = mu v + g; w -= lr v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgdm {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<f64>,
}

impl Sgdm {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self { lr, momentum, velocity: Vec::new() }
    }
}

impl UpdateRule for Sgdm {
    fn name(&self) -> &'static str {
        "sgdm"
    }

    fn update(&mut self, w: &mut [f64], g: &[f64]) {
        if self.velocity.len() != w.len() {
            self.velocity = vec![0.0; w.len()];
        }
        for ((wi, vi), gi) in w.iter_mut().zip(&mut self.velocity).zip(g) {
            *vi = self.momentum * *vi + gi;
            *wi -= self.lr * *vi;
        }
    }
}

/// Bias-corrected Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self { lr, beta1, beta2, eps: 1e-8, m: Vec::new(), v: Vec::new(), t: 0 }
    }

    pub fn with_lr(lr: f64) -> Self {
        Self::new(lr, 0.9, 0.999)
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// First and second moment buffers.
    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.m, &self.v)
    }

    pub fn restore(&mut self, m: Vec<f64>, v: Vec<f64>, t: i32) {
        self.m = m;
        self.v = v;
        self.t = t;
    }
}

impl UpdateRule for Adam {
    fn name(&self) -> &'static str {
        "adam"
    }

    fn update(&mut self, w: &mut [f64], g: &[f64]) {
        if self.m.len() != w.len() {
            self.m = vec![0.0; w.len()];
            self.v = vec![0.0; w.len()];
            self.t = 0;
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..w.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            w[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// `a = decay a + (1 - decay) g^2; w -= lr g / (sqrt(a) + eps)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsProp {
    pub lr: f64,
    pub decay: f64,
    pub eps: f64,
    sq: Vec<f64>,
}

impl RmsProp {
    pub fn new(lr: f64, decay: f64) -> Self {
        Self { lr, decay, eps: 1e-8, sq: Vec::new() }
    }
}

impl UpdateRule for RmsProp {
    fn name(&self) -> &'static str {
        "rmsprop"
    }

    fn update(&mut self, w: &mut [f64], g: &[f64]) {
        if self.sq.len() != w.len() {
            self.sq = vec![0.0; w.len()];
        }
        for ((wi, ai), gi) in w.iter_mut().zip(&mut self.sq).zip(g) {
            *ai = self.decay * *ai + (1.0 - self.decay) * gi * gi;
            *wi -= self.lr * gi / (ai.sqrt() + self.eps);
        }
    }
}
