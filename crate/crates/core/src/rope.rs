//! Rotary positional embeddings.
//!
//! Consecutive pairs `(x[2j], x[2j+1])` of a head vector at position `t` are
//! rotated by `t * theta^(-2j/head_dim)`. Rotation is orthogonal, so the
//! gradient of the rotation is the rotation by the negated angle.

#[derive(Clone, Debug)]
pub struct RopeTable {
    head_dim: usize,
    max_pos: usize,
    // cos/sin laid out [pos][pair]
    cos: Vec<f32>,
    sin: Vec<f32>,
}

impl RopeTable {
    pub fn new(head_dim: usize, max_pos: usize, theta: f32) -> Self {
        assert!(head_dim.is_multiple_of(2), "head_dim must be even for rotary pairs");
        let pairs = head_dim / 2;
        let mut cos = Vec::with_capacity(max_pos * pairs);
        let mut sin = Vec::with_capacity(max_pos * pairs);
        for pos in 0..max_pos {
            for j in 0..pairs {
                let freq = (theta as f64).powf(-2.0 * j as f64 / head_dim as f64);
                let angle = pos as f64 * freq;
                cos.push(angle.cos() as f32);
                sin.push(angle.sin() as f32);
            }
        }
        RopeTable {
            head_dim,
            max_pos,
            cos,
            sin,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    /// Rotates one head vector in place for position `pos`.
    pub fn apply(&self, pos: usize, head: &mut [f32]) {
        self.rotate(pos, head, 1.0)
    }

    /// Applies the inverse rotation (used for the backward pass).
    pub fn apply_inverse(&self, pos: usize, head: &mut [f32]) {
        self.rotate(pos, head, -1.0)
    }

    fn rotate(&self, pos: usize, head: &mut [f32], sign: f32) {
        assert_eq!(head.len(), self.head_dim);
        assert!(pos < self.max_pos, "position {} beyond table {}", pos, self.max_pos);
        let pairs = self.head_dim / 2;
        let base = pos * pairs;
        for j in 0..pairs {
            let (c, s) = (self.cos[base + j], sign * self.sin[base + j]);
            let (x0, x1) = (head[2 * j], head[2 * j + 1]);
            head[2 * j] = x0 * c - x1 * s;
            head[2 * j + 1] = x0 * s + x1 * c;
        }
    }
}
