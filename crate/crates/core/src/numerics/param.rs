use std::sync::atomic::{AtomicU64, Ordering};

use sha2::{Digest, Sha256};

use super::tape::Gradients;
use super::tensor::{Scalar, Tensor};

static NEXT_KEY: AtomicU64 = AtomicU64::new(1);

/// Identity of a parameter on a tape. Clones share a key; use
/// [`Parameter::detached`] for an independent copy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamKey(u64);

impl ParamKey {
    fn fresh() -> Self {
        ParamKey(NEXT_KEY.fetch_add(1, Ordering::Relaxed))
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<T: Scalar = f32> {
    key: ParamKey,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
    grad_ready: bool,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            key: ParamKey::fresh(),
            value,
            grad,
            trainable: true,
            grad_ready: false,
        }
    }

    pub fn key(&self) -> ParamKey {
        self.key
    }

    /// Deep copy with a new key, zeroed gradient and the same trainable flag.
    pub fn detached(&self) -> Self {
        let mut p = Self::new(self.value.clone());
        p.trainable = self.trainable;
        p
    }

    pub fn cast<U: Scalar>(&self) -> Parameter<U> {
        let mut p = Parameter::new(self.value.cast());
        p.trainable = self.trainable;
        p
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    pub fn grad_ready(&self) -> bool {
        self.grad_ready
    }

    /// Adds `g` into the gradient buffer and marks the gradient fresh.
    pub fn accumulate(&mut self, g: Option<&Tensor<T>>) {
        if let Some(g) = g {
            self.grad.add_assign(g);
        }
        self.grad_ready = true;
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
        self.grad_ready = false;
    }
}

/// Anything that owns parameters. Names are stable and used by checkpoints.
pub trait Module<T: Scalar> {
    fn named_params(&self) -> Vec<(String, &Parameter<T>)>;
    fn named_params_mut(&mut self) -> Vec<(String, &mut Parameter<T>)>;

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.numel()).sum()
    }

    fn trainable_count(&self) -> usize {
        self.named_params()
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(_, p)| p.numel())
            .sum()
    }

    fn set_trainable(&mut self, trainable: bool) {
        for (_, p) in self.named_params_mut() {
            p.trainable = trainable;
        }
    }

    fn any_trainable(&self) -> bool {
        self.named_params().iter().any(|(_, p)| p.trainable)
    }

    /// SHA-256 over parameter names and little-endian value bytes.
    fn weight_hash(&self) -> String {
        let mut hasher = Sha256::new();
        let mut buf = Vec::new();
        for (name, p) in self.named_params() {
            hasher.update(name.as_bytes());
            buf.clear();
            p.value.write_le(&mut buf);
            hasher.update(&buf);
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Moves tape gradients into the trainable parameters' buffers.
    fn accumulate_grads(&mut self, grads: &Gradients<T>) {
        for (_, p) in self.named_params_mut() {
            if p.trainable {
                let g = grads.param(p.key());
                p.accumulate(g);
            }
        }
    }

    fn scale_grads(&mut self, s: T) {
        for (_, p) in self.named_params_mut() {
            p.grad.scale_in_place(s);
        }
    }

    fn zero_grads(&mut self) {
        for (_, p) in self.named_params_mut() {
            p.zero_grad();
        }
    }
}

/// Hash of several modules taken together, in order.
pub fn combined_hash<T: Scalar>(modules: &[&dyn Module<T>]) -> String {
    modules
        .iter()
        .map(|m| m.weight_hash())
        .collect::<Vec<_>>()
        .join(":")
}
