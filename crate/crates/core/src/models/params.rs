//! Named parameter storage, per-pass binding onto a tape, and checkpoints.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::numerics::{fdt, Gradients, Tape, Tensor, Var};
use crate::rng::Stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Component {
    Theta,
    Edit,
    Video,
    Align,
    DiscEdit,
    DiscVideo,
}

impl Component {
    pub const ALL: [Component; 6] = [
        Component::Theta,
        Component::Edit,
        Component::Video,
        Component::Align,
        Component::DiscEdit,
        Component::DiscVideo,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Component::Theta => "theta",
            Component::Edit => "theta_edit",
            Component::Video => "theta_video",
            Component::Align => "theta_align",
            Component::DiscEdit => "D_e",
            Component::DiscVideo => "D_v",
        }
    }

    /// Name prefix of the component's parameters.
    pub fn prefix(self) -> &'static str {
        match self {
            Component::Theta => "theta.",
            Component::Edit => "edit.",
            Component::Video => "video.",
            Component::Align => "align.",
            Component::DiscEdit => "de.",
            Component::DiscVideo => "dv.",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Component> {
        Component::ALL
            .into_iter()
            .find(|c| c.tag() == tag)
            .ok_or_else(|| invalid("checkpoint", format!("unknown component tag `{tag}`")))
    }

    pub fn of(name: &str) -> Option<Component> {
        Component::ALL.into_iter().find(|c| name.starts_with(c.prefix()))
    }
}

/// All parameters of a model, keyed by dotted name. The component is implied
/// by the name prefix.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if Component::of(&name).is_none() {
            return Err(invalid("params", format!("`{name}` has no component prefix")));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| invalid("params", format!("no parameter named `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn has_component(&self, c: Component) -> bool {
        self.tensors.keys().any(|k| k.starts_with(c.prefix()))
    }

    pub fn names(&self, c: Component) -> Vec<String> {
        self.tensors.keys().filter(|k| k.starts_with(c.prefix())).cloned().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn remove_component(&mut self, c: Component) {
        self.tensors.retain(|k, _| !k.starts_with(c.prefix()));
    }

    /// Copy every parameter of `c` from `other`, replacing existing ones.
    pub fn adopt(&mut self, other: &ParamStore, c: Component) {
        self.remove_component(c);
        for (k, v) in other.tensors.iter().filter(|(k, _)| k.starts_with(c.prefix())) {
            self.tensors.insert(k.clone(), v.clone());
        }
    }

    pub fn numel(&self, c: Component) -> usize {
        self.tensors
            .iter()
            .filter(|(k, _)| k.starts_with(c.prefix()))
            .map(|(_, v)| v.numel())
            .sum()
    }

    /// SHA-256 over names, shapes and values of one component.
    pub fn checksum(&self, c: Component) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (k, v) in self.tensors.iter().filter(|(k, _)| k.starts_with(c.prefix())) {
            h.update(k.as_bytes());
            h.update([0u8]);
            v.update_digest(&mut h);
        }
        crate::numerics::hex(&h.finalize())
    }

    /// Write the given components as FDT1 files plus `manifest.tsv`.
    pub fn save(&self, dir: &Path, components: &[Component]) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut manifest = String::from("name\tcomponent\tshape\tfile\n");
        for (k, v) in &self.tensors {
            let c = Component::of(k).expect("validated on insert");
            if !components.contains(&c) {
                continue;
            }
            let file = format!("{k}.fdt");
            fdt::write(&dir.join(&file), v)?;
            let shape: Vec<String> = v.shape().iter().map(|d| d.to_string()).collect();
            manifest.push_str(&format!("{k}\t{}\t{}\t{file}\n", c.tag(), shape.join("x")));
        }
        fs::write(dir.join("manifest.tsv"), manifest)?;
        Ok(())
    }

    /// Load every tensor listed in `dir/manifest.tsv` into this store.
    pub fn load_into(&mut self, dir: &Path) -> Result<Vec<Component>> {
        let path = dir.join("manifest.tsv");
        let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.clone()),
            _ => Error::Io(e),
        })?;
        let mut seen = Vec::new();
        for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
            let cols: Vec<&str> = line.split('\t').collect();
            let bad = |msg: String| Error::Format { path: path.clone(), msg };
            if cols.len() != 4 {
                return Err(bad(format!("expected 4 columns in `{line}`")));
            }
            let c = Component::from_tag(cols[1])?;
            if Component::of(cols[0]) != Some(c) {
                return Err(bad(format!("`{}` is not part of {}", cols[0], cols[1])));
            }
            let t = fdt::read(&dir.join(cols[3]))?;
            let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            if shape.join("x") != cols[2] {
                return Err(bad(format!("`{}` has shape {:?}, manifest says {}", cols[0], t.shape(), cols[2])));
            }
            self.tensors.insert(cols[0].to_string(), t);
            if !seen.contains(&c) {
                seen.push(c);
            }
        }
        Ok(seen)
    }
}

/// Deterministic initializers. Each parameter draws from a stream split by
/// its own name, so initialization does not depend on creation order.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: Stream,
}

impl Init<'_> {
    fn normal(&mut self, name: &str, shape: &[usize], std: f32) -> Result<()> {
        let t = self.rng.split(name).normal_tensor(shape).scale(std);
        self.store.insert(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.store.insert(name, Tensor::zeros(shape))
    }

    pub fn conv(&mut self, p: &str, out: usize, inp: usize, k: usize) -> Result<()> {
        self.normal(&format!("{p}.w"), &[out, inp, k, k], (1.0 / (inp * k * k) as f32).sqrt())?;
        self.zeros(&format!("{p}.b"), &[out])
    }

    pub fn zero_conv(&mut self, p: &str, out: usize, inp: usize, k: usize) -> Result<()> {
        self.zeros(&format!("{p}.w"), &[out, inp, k, k])?;
        self.zeros(&format!("{p}.b"), &[out])
    }

    pub fn linear(&mut self, p: &str, out: usize, inp: usize) -> Result<()> {
        self.normal(&format!("{p}.w"), &[out, inp], (1.0 / inp as f32).sqrt())?;
        self.zeros(&format!("{p}.b"), &[out])
    }

    pub fn linear_nobias(&mut self, p: &str, out: usize, inp: usize) -> Result<()> {
        self.normal(&format!("{p}.w"), &[out, inp], (1.0 / inp as f32).sqrt())
    }

    pub fn zero_linear(&mut self, p: &str, out: usize, inp: usize) -> Result<()> {
        self.zeros(&format!("{p}.w"), &[out, inp])?;
        self.zeros(&format!("{p}.b"), &[out])
    }

    pub fn norm(&mut self, p: &str, c: usize) -> Result<()> {
        self.store.insert(format!("{p}.g"), Tensor::ones(&[c]))?;
        self.zeros(&format!("{p}.b"), &[c])
    }

    pub fn table(&mut self, name: &str, rows: usize, dim: usize, std: f32) -> Result<()> {
        self.normal(name, &[rows, dim], std)
    }

    pub fn raw(&mut self, name: &str, shape: &[usize], std: f32) -> Result<()> {
        self.normal(name, shape, std)
    }
}

/// Binds stored parameters for one forward pass. Parameters of trainable
/// components become tape leaves; everything else is a constant, so no
/// gradient can reach a frozen component.
pub struct Binder<'a> {
    store: &'a ParamStore,
    tape: Option<Tape>,
    trainable: Vec<Component>,
    lora: Option<LoraSpec>,
    cache: RefCell<HashMap<String, Var>>,
    weights: RefCell<HashMap<String, Var>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoraSpec {
    pub rank: usize,
    pub alpha: f32,
}

impl<'a> Binder<'a> {
    /// Inference binding: everything constant.
    pub fn frozen(store: &'a ParamStore) -> Self {
        Self::new(store, None, &[])
    }

    pub fn new(store: &'a ParamStore, tape: Option<&Tape>, trainable: &[Component]) -> Self {
        Self {
            store,
            tape: tape.cloned(),
            trainable: if tape.is_some() { trainable.to_vec() } else { vec![] },
            lora: None,
            cache: RefCell::new(HashMap::new()),
            weights: RefCell::new(HashMap::new()),
        }
    }

    /// Route backbone weights through their LoRA deltas.
    pub fn with_lora(mut self, spec: LoraSpec) -> Self {
        self.lora = Some(spec);
        self
    }

    pub fn lora(&self) -> Option<LoraSpec> {
        self.lora
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn is_trainable(&self, c: Component) -> bool {
        self.trainable.contains(&c)
    }

    /// The raw stored parameter.
    pub fn param(&self, name: &str) -> Result<Var> {
        if let Some(v) = self.cache.borrow().get(name) {
            return Ok(v.clone());
        }
        let t = self.store.get(name)?.clone();
        let c = Component::of(name).expect("validated on insert");
        let v = match &self.tape {
            Some(tape) if self.trainable.contains(&c) => tape.leaf(t),
            _ => Var::constant(t),
        };
        self.cache.borrow_mut().insert(name.to_string(), v.clone());
        Ok(v)
    }

    /// A conv or linear weight as used in the forward pass: `W + (alpha / r) B A`
    /// for backbone weights when LoRA is active, the stored weight otherwise.
    pub fn weight(&self, name: &str) -> Result<Var> {
        let Some(spec) = self.lora.filter(|_| name.starts_with(Component::Theta.prefix())) else {
            return self.param(name);
        };
        if let Some(v) = self.weights.borrow().get(name) {
            return Ok(v.clone());
        }
        let w = self.param(name)?;
        let a = self.param(&lora_name(name, "a"))?;
        let b = self.param(&lora_name(name, "b"))?;
        let v = super::lora::effective(&w, &a, &b, spec)?;
        self.weights.borrow_mut().insert(name.to_string(), v.clone());
        Ok(v)
    }

    /// Gradients of every bound trainable parameter, by name. Parameters that
    /// did not influence the loss get zeros.
    pub fn grads(&self, g: &Gradients) -> Vec<(String, Tensor)> {
        let cache = self.cache.borrow();
        let mut out: Vec<(String, Tensor)> = cache
            .iter()
            .filter(|(_, v)| v.requires_grad())
            .map(|(k, v)| (k.clone(), g.wrt(v)))
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }
}

/// Name of a LoRA factor (`a` or `b`) for backbone weight `w`.
pub fn lora_name(w: &str, which: &str) -> String {
    format!("align.{}.{which}", w.trim_start_matches(Component::Theta.prefix()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::backward;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("theta.w", Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap()).unwrap();
        s.insert("edit.w", Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap()).unwrap();
        s
    }

    #[test]
    fn frozen_components_get_no_gradient() {
        let s = store();
        let tape = Tape::new();
        let b = Binder::new(&s, Some(&tape), &[Component::Edit]);
        let loss = b.param("theta.w").unwrap().mul(&b.param("edit.w").unwrap()).unwrap().sum();
        let g = b.grads(&backward(&loss).unwrap());
        assert_eq!(g.len(), 1);
        assert_eq!(g[0].0, "edit.w");
        assert_eq!(g[0].1.data(), &[1.0, 2.0]);
    }

    #[test]
    fn names_need_a_component() {
        let mut s = ParamStore::new();
        assert!(s.insert("misc.w", Tensor::scalar(1.0)).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let s = store();
        let dir = tempfile::tempdir().unwrap();
        s.save(dir.path(), &[Component::Theta]).unwrap();
        let mut back = ParamStore::new();
        assert_eq!(back.load_into(dir.path()).unwrap(), vec![Component::Theta]);
        assert!(back.get("theta.w").unwrap().bit_eq(s.get("theta.w").unwrap()));
        assert!(!back.contains("edit.w"));
        assert_eq!(back.checksum(Component::Theta), s.checksum(Component::Theta));
    }

    #[test]
    fn missing_checkpoint_is_reported() {
        let mut s = ParamStore::new();
        let err = s.load_into(Path::new("/nonexistent/ckpt")).unwrap_err();
        assert!(matches!(err, Error::MissingArtifact(_)));
    }
}
