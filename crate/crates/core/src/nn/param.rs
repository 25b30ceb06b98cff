use super::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// A trainable tensor with a stable name (used in checkpoints) and an id
/// (used to address its gradient).
#[derive(Debug, Clone)]
pub struct Param {
    pub id: ParamId,
    pub name: String,
    pub value: Tensor,
}

/// Hands out sequential ids while a model is being built.
#[derive(Debug, Default)]
pub struct ParamRegistry {
    next: usize,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Param {
        let id = ParamId(self.next);
        self.next += 1;
        Param { id, name: name.into(), value }
    }

    pub fn count(&self) -> usize {
        self.next
    }
}

/// Gradient accumulator aligned with a model's parameter ids.
#[derive(Debug, Clone)]
pub struct GradStore {
    grads: Vec<Option<Tensor>>,
}

impl GradStore {
    pub fn new(n_params: usize) -> Self {
        GradStore { grads: vec![None; n_params] }
    }

    pub fn accumulate(&mut self, id: ParamId, grad: Tensor) {
        match &mut self.grads[id.0] {
            Some(g) => g.add_assign(&grad),
            slot @ None => *slot = Some(grad),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn sq_norm(&self) -> f64 {
        self.grads.iter().flatten().map(Tensor::sq_norm).sum()
    }
}
