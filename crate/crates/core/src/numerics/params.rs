use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::numerics::tensor::Tensor;

/// A named collection of tensors, visited in a fixed order.
pub trait Parameters {
    fn visit(&self, f: &mut dyn FnMut(String, &Tensor));
    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor));

    fn set_requires_grad(&mut self, flag: bool) {
        self.visit_mut(&mut |_, t| t.set_requires_grad(flag));
    }

    fn zero_grad(&self) {
        self.visit(&mut |_, t| t.zero_grad());
    }

    fn num_values(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }

    fn fingerprints(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        self.visit(&mut |name, t| {
            out.insert(name, t.fingerprint());
        });
        out
    }

    /// One hash over every tensor, in visit order.
    fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        self.visit(&mut |name, t| {
            h.update(name.as_bytes());
            t.hash_into(&mut h);
        });
        hex::encode(h.finalize())
    }

    /// Names of tensors currently holding a gradient.
    fn with_grad(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| {
            if t.has_grad() {
                out.push(name);
            }
        });
        out
    }
}

impl Parameters for Vec<Tensor> {
    fn visit(&self, f: &mut dyn FnMut(String, &Tensor)) {
        for (i, t) in self.iter().enumerate() {
            f(i.to_string(), t);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, t) in self.iter_mut().enumerate() {
            f(i.to_string(), t);
        }
    }
}

/// Visits `child` with every name prefixed by `prefix.`.
pub fn visit_child<P: Parameters + ?Sized>(child: &P, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
    child.visit(&mut |name, t| f(format!("{prefix}.{name}"), t));
}

pub fn visit_child_mut<P: Parameters + ?Sized>(
    child: &mut P,
    prefix: &str,
    f: &mut dyn FnMut(String, &mut Tensor),
) {
    child.visit_mut(&mut |name, t| f(format!("{prefix}.{name}"), t));
}
