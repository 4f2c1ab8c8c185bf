use ndarray::Array2;

use crate::graph::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a stored array is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Learnable weight (trainable or frozen).
    Weight,
    /// Non-learned running state, e.g. batch-norm statistics.
    Buffer,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Mat,
    pub trainable: bool,
    pub kind: ParamKind,
}

/// Named arrays owned by a model. Values are kept exactly representable in
/// single precision so that checkpoints written as `f32` round-trip bit-exactly.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

/// Rounds every entry to the nearest `f32`.
pub fn to_storage_precision(m: &mut Mat) {
    m.mapv_inplace(|v| v as f32 as f64);
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, mut value: Mat, trainable: bool) -> ParamId {
        to_storage_precision(&mut value);
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param {
            name,
            value,
            trainable,
            kind: ParamKind::Weight,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, mut value: Mat) -> ParamId {
        to_storage_precision(&mut value);
        self.params.push(Param {
            name: name.into(),
            value,
            trainable: false,
            kind: ParamKind::Buffer,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: (usize, usize), trainable: bool) -> ParamId {
        self.add(name, Array2::zeros(shape), trainable)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.params[id.0].value
    }

    /// Overwrites a value, rounding to storage precision.
    pub fn set_value(&mut self, id: ParamId, mut value: Mat) {
        assert_eq!(value.dim(), self.params[id.0].value.dim(), "shape change for {}", self.params[id.0].name);
        to_storage_precision(&mut value);
        self.params[id.0].value = value;
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.iter().filter(move |(_, p)| p.name.starts_with(prefix)).map(|(id, _)| id)
    }

    /// Scalar entry counts of (trainable, frozen) weights; buffers excluded.
    pub fn count_entries(&self) -> (usize, usize) {
        let mut trainable = 0;
        let mut frozen = 0;
        for p in self.params.iter().filter(|p| p.kind == ParamKind::Weight) {
            if p.trainable {
                trainable += p.value.len();
            } else {
                frozen += p.value.len();
            }
        }
        (trainable, frozen)
    }
}
