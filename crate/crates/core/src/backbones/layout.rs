use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};

/// How a parameter segment is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `[-b, b]`.
    Uniform(f64),
    Const(f64),
}

impl Init {
    /// Largest magnitude the initializer can produce.
    pub fn bound(self) -> f64 {
        match self {
            Init::Uniform(b) => b,
            Init::Const(c) => c.abs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub init: Init,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Named segments of a flat parameter vector.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Layout {
    segments: Vec<Segment>,
    len: usize,
}

impl Layout {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn add(&mut self, name: impl Into<String>, rows: usize, cols: usize, init: Init) -> usize {
        let offset = self.len;
        self.segments.push(Segment {
            name: name.into(),
            offset,
            rows,
            cols,
            init,
        });
        self.len += rows * cols;
        offset
    }

    pub fn dense(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Dense {
        let b = 1.0 / (fan_in as f64).sqrt();
        let w = self.add(format!("{name}.w"), fan_in, fan_out, Init::Uniform(b));
        let bias = self.add(format!("{name}.b"), 1, fan_out, Init::Uniform(b));
        Dense {
            w,
            b: bias,
            fan_in,
            fan_out,
        }
    }

    /// One hidden layer with SiLU.
    pub fn mlp(&mut self, name: &str, fan_in: usize, hidden: usize, fan_out: usize) -> Mlp1 {
        Mlp1 {
            l1: self.dense(&format!("{name}.0"), fan_in, hidden),
            l2: self.dense(&format!("{name}.1"), hidden, fan_out),
        }
    }

    pub fn norm(&mut self, name: &str, width: usize) -> Norm {
        Norm {
            gamma: self.add(format!("{name}.gamma"), 1, width, Init::Const(1.0)),
            beta: self.add(format!("{name}.beta"), 1, width, Init::Const(0.0)),
            width,
        }
    }

    pub fn embedding(&mut self, name: &str, count: usize, width: usize) -> Embedding {
        Embedding {
            table: self.add(name, count, width, Init::Uniform(1.0)),
            count,
            width,
        }
    }

    /// Deterministic initialization from `seed`.
    pub fn random_init(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(self.len);
        for seg in &self.segments {
            for _ in 0..seg.len() {
                out.push(match seg.init {
                    Init::Uniform(b) => rng.random_range(-b..=b),
                    Init::Const(c) => c,
                });
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dense {
    pub w: usize,
    pub b: usize,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Dense {
    pub fn apply(&self, t: &mut Tape<'_>, x: Var) -> Var {
        let w = t.param(self.w, self.fan_in, self.fan_out);
        let b = t.param(self.b, 1, self.fan_out);
        t.linear(x, w, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mlp1 {
    pub l1: Dense,
    pub l2: Dense,
}

impl Mlp1 {
    pub fn apply(&self, t: &mut Tape<'_>, x: Var) -> Var {
        let h = self.l1.apply(t, x);
        let h = t.silu(h);
        self.l2.apply(t, h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Norm {
    pub gamma: usize,
    pub beta: usize,
    pub width: usize,
}

impl Norm {
    pub fn apply(&self, t: &mut Tape<'_>, x: Var) -> Var {
        let g = t.param(self.gamma, 1, self.width);
        let b = t.param(self.beta, 1, self.width);
        t.layer_norm(x, g, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Embedding {
    pub table: usize,
    pub count: usize,
    pub width: usize,
}

impl Embedding {
    pub fn lookup(&self, t: &mut Tape<'_>, idx: &[usize]) -> Var {
        let table = t.param(self.table, self.count, self.width);
        t.gather_rows(table, idx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> Layout {
        let mut l = Layout::default();
        l.embedding("emb", 3, 4);
        l.mlp("m", 8, 16, 2);
        l.norm("ln", 16);
        l
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let l = layout();
        let a = l.random_init(3);
        assert_eq!(a, l.random_init(3));
        assert_ne!(a, l.random_init(4));
        assert_eq!(a.len(), l.len());
        for seg in l.segments() {
            for &x in &a[seg.range()] {
                assert!(x.abs() <= seg.init.bound(), "{} out of bounds", seg.name);
            }
        }
        let m0 = &l.segments()[1];
        assert_eq!(m0.init, Init::Uniform(1.0 / 8f64.sqrt()));
    }
}
