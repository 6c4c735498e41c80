use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Handle to a named parameter tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Flat registry of all learnable parameters. Model components hold
/// `ParamId`s; the trainer and checkpointer own the actual values.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alloc(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> ParamId {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, data.len(), "parameter data length must match shape");
        self.entries.push(ParamEntry { name: name.into(), shape, data });
        ParamId(self.entries.len() - 1)
    }

    pub fn alloc_zeros(&mut self, name: impl Into<String>, shape: Vec<usize>) -> ParamId {
        let numel = shape.iter().product();
        self.alloc(name, shape, vec![0.0; numel])
    }

    pub fn alloc_ones(&mut self, name: impl Into<String>, shape: Vec<usize>) -> ParamId {
        let numel = shape.iter().product();
        self.alloc(name, shape, vec![1.0; numel])
    }

    /// Gaussian init with the given std.
    pub fn alloc_normal(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        std: f64,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| standard_normal(rng) * std)
            .collect();
        self.alloc(name, shape, data)
    }

    pub fn get(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamEntry {
        &mut self.entries[id.0]
    }

    pub fn values(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].data
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn total_numel(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }
}

/// Standard normal draw via Box-Muller, deterministic given the rng state.
pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u1: f64 = rng.gen::<f64>();
        let u2: f64 = rng.gen::<f64>();
        if u1 > f64::MIN_POSITIVE {
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}
