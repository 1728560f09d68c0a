//! Named parameter layout, initialisation and binding onto a graph.
//!
//! Every trainable tensor has a dotted hierarchical name such as
//! `encoder.2.units.1.conv1.weight`. The layout is a pure function of the
//! [`ModelConfig`]; [`param_specs`] enumerates it without allocating weights.

use std::collections::BTreeMap;

use cisunet_tensor::{Gradients, Graph, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::{AttentionVariant, ModelConfig};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Zero-mean normal with standard deviation `sqrt(gain / fan_in)`.
    Normal {
        fan_in: usize,
        gain: f64,
    },
    Ones,
    Zeros,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Default)]
struct Layout {
    specs: Vec<ParamSpec>,
}

impl Layout {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) {
        self.specs.push(ParamSpec { name, shape, init });
    }

    /// Cubic conv without bias; every such conv feeds an instance norm.
    fn conv(&mut self, name: &str, cout: usize, k: usize, cin: usize) {
        let fan_in = k * k * k * cin;
        self.push(
            format!("{name}.weight"),
            vec![cout, k, k, k, cin],
            Init::Normal { fan_in, gain: 2.0 },
        );
    }

    fn norm(&mut self, name: &str, c: usize) {
        self.push(format!("{name}.gamma"), vec![c], Init::Ones);
        self.push(format!("{name}.beta"), vec![c], Init::Zeros);
    }

    fn conv_norm(&mut self, conv: &str, norm: &str, cout: usize, k: usize, cin: usize) {
        self.conv(conv, cout, k, cin);
        self.norm(norm, cout);
    }

    fn linear(&mut self, name: &str, out: usize, inp: usize) {
        self.push(
            format!("{name}.weight"),
            vec![out, inp],
            Init::Normal {
                fan_in: inp,
                gain: 1.0,
            },
        );
        self.push(format!("{name}.bias"), vec![out], Init::Zeros);
    }

    fn conv_transpose(&mut self, name: &str, cin: usize, cout: usize, gain: f64) {
        self.push(
            format!("{name}.weight"),
            vec![cin, 2, 2, 2, cout],
            Init::Normal { fan_in: cin, gain },
        );
    }

    fn residual_unit(&mut self, prefix: &str, c: usize) {
        self.conv_norm(
            &format!("{prefix}.conv1"),
            &format!("{prefix}.norm1"),
            c,
            3,
            c,
        );
        self.conv_norm(
            &format!("{prefix}.conv2"),
            &format!("{prefix}.norm2"),
            c,
            3,
            c,
        );
    }

    fn attention(&mut self, prefix: &str, cfg: &ModelConfig) {
        let f = cfg.embed_dim;
        let m = 2 * cfg.window_size - 1;
        self.linear(&format!("{prefix}.qkv"), 3 * f, f);
        self.linear(&format!("{prefix}.proj"), f, f);
        self.push(
            format!("{prefix}.rel_bias"),
            vec![m * m * m, cfg.num_heads],
            Init::Zeros,
        );
    }

    fn mlp(&mut self, prefix: &str, cfg: &ModelConfig) {
        let hidden = cfg.mlp_hidden();
        self.linear(&format!("{prefix}.fc1"), hidden, cfg.embed_dim);
        self.linear(&format!("{prefix}.fc2"), cfg.embed_dim, hidden);
    }
}

/// Names, shapes and initialisers of every trainable tensor, in a fixed order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut l = Layout::default();
    let c = cfg.stage_channels;
    let f = cfg.embed_dim;

    l.conv_norm("stem.conv", "stem.norm", c[0], 7, cfg.in_channels);

    let mut prev = c[0];
    for k in 0..4 {
        let p = format!("encoder.{}", k + 1);
        l.conv_norm(
            &format!("{p}.down.conv1"),
            &format!("{p}.down.norm1"),
            c[k],
            3,
            prev,
        );
        l.conv_norm(
            &format!("{p}.down.conv2"),
            &format!("{p}.down.norm2"),
            c[k],
            3,
            c[k],
        );
        for j in 0..cfg.stage_depths[k] {
            l.residual_unit(&format!("{p}.units.{j}"), c[k]);
        }
        prev = c[k];
    }

    l.linear("bottleneck.embed", f, c[3]);
    l.norm("bottleneck.swin.norm1", f);
    l.attention("bottleneck.swin.wmsa", cfg);
    l.norm("bottleneck.swin.norm2", f);
    l.mlp("bottleneck.swin.mlp1", cfg);
    l.norm("bottleneck.swin.norm3", f);
    l.attention("bottleneck.swin.swmsa", cfg);
    l.norm("bottleneck.swin.norm4", f);
    l.mlp("bottleneck.swin.mlp2", cfg);
    let refine_in = match cfg.attention_variant {
        AttentionVariant::CswSa => {
            l.norm("bottleneck.merge.norm", 8 * f);
            l.linear("bottleneck.merge.reduce", 2 * f, 8 * f);
            l.conv_transpose("bottleneck.upsample", 2 * f, f, 1.0);
            l.push("bottleneck.upsample.bias".into(), vec![f], Init::Zeros);
            2 * f
        }
        AttentionVariant::SwSa => f,
    };
    l.conv_norm(
        "bottleneck.refine.conv1",
        "bottleneck.refine.norm1",
        f,
        3,
        refine_in,
    );
    l.conv_norm(
        "bottleneck.refine.conv2",
        "bottleneck.refine.norm2",
        f,
        3,
        f,
    );

    let plan = decoder_channels(cfg);
    let mut up_in = f;
    for (i, &out) in plan.iter().enumerate() {
        let p = format!("decoder.{}", i + 1);
        l.conv_transpose(&format!("{p}.up"), up_in, out, 2.0);
        l.norm(&format!("{p}.up_norm"), out);
        l.conv_norm(
            &format!("{p}.conv1"),
            &format!("{p}.norm1"),
            out,
            3,
            2 * out,
        );
        l.conv_norm(&format!("{p}.conv2"), &format!("{p}.norm2"), out, 3, out);
        up_in = out;
    }

    l.linear("head", cfg.num_classes, c[0]);
    l.specs
}

/// Output widths of the four decoder steps, deepest first.
pub fn decoder_channels(cfg: &ModelConfig) -> [usize; 4] {
    let c = cfg.stage_channels;
    [c[2], c[1], c[0], c[0]]
}

/// Exact number of trainable scalars.
pub fn count_parameters(cfg: &ModelConfig) -> usize {
    param_specs(cfg).iter().map(ParamSpec::numel).sum()
}

/// Parameter counts grouped by module (`stem`, `encoder.k`, `bottleneck.*`,
/// `decoder.k`, `head`), in network order. Sums to [`count_parameters`].
pub fn parameter_breakdown(cfg: &ModelConfig) -> Vec<(String, usize)> {
    let mut out: Vec<(String, usize)> = Vec::new();
    for spec in param_specs(cfg) {
        let parts: Vec<&str> = spec.name.split('.').collect();
        let module = match parts[0] {
            "encoder" | "decoder" | "bottleneck" => parts[..2].join("."),
            other => other.to_string(),
        };
        match out.last_mut() {
            Some((name, n)) if *name == module => *n += spec.numel(),
            _ => out.push((module, spec.numel())),
        }
    }
    out
}

/// All trainable tensors of a network, keyed by name.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParameters<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> NetworkParameters<T> {
    /// Random initialisation, deterministic in `seed`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = param_specs(cfg)
            .into_iter()
            .map(|spec| {
                let n = spec.numel();
                let data: Vec<T> = match spec.init {
                    Init::Ones => vec![T::one(); n],
                    Init::Zeros => vec![T::zero(); n],
                    Init::Normal { fan_in, gain } => {
                        let std = (gain / fan_in as f64).sqrt();
                        (0..n)
                            .map(|_| {
                                let z: f64 = StandardNormal.sample(&mut rng);
                                T::of(z * std)
                            })
                            .collect()
                    }
                };
                let t = Tensor::new(spec.shape, data).expect("spec shape");
                (spec.name, t)
            })
            .collect();
        NetworkParameters { tensors }
    }

    /// Builds from named tensors, checking the set of names and every shape
    /// against the layout of `cfg`.
    pub fn from_tensors(
        cfg: &ModelConfig,
        mut tensors: BTreeMap<String, Tensor<T>>,
    ) -> Result<Self> {
        let specs = param_specs(cfg);
        let mut out = BTreeMap::new();
        for spec in specs {
            let t = tensors
                .remove(&spec.name)
                .ok_or_else(|| Error::MissingParameter(spec.name.clone()))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::invalid(
                    "parameters",
                    format!(
                        "`{}` has shape {:?}, expected {:?}",
                        spec.name,
                        t.shape(),
                        spec.shape
                    ),
                ));
            }
            out.insert(spec.name, t);
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::invalid(
                "parameters",
                format!("unexpected tensor `{extra}`"),
            ));
        }
        Ok(NetworkParameters { tensors: out })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn total_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> NetworkParameters<U> {
        NetworkParameters {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Registers every tensor as a leaf of `g`.
    pub fn bind(&self, g: &Graph<T>) -> BoundParams<T> {
        BoundParams {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), g.leaf(v.clone())))
                .collect(),
        }
    }
}

/// Parameters registered on a graph.
pub struct BoundParams<T> {
    vars: BTreeMap<String, Var<T>>,
}

impl<T: Scalar> BoundParams<T> {
    pub fn var(&self, name: &str) -> Result<&Var<T>> {
        self.vars
            .get(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn root(&self) -> Scope<'_, T> {
        Scope {
            params: self,
            prefix: String::new(),
        }
    }

    pub fn scope(&self, prefix: &str) -> Scope<'_, T> {
        self.root().sub(prefix)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var<T>)> {
        self.vars.iter()
    }

    /// Gradient of every parameter, zero-filled where a parameter did not
    /// influence the root.
    pub fn gradients(&self, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), grads.get_or_zeros(v)))
            .collect()
    }
}

/// A view of bound parameters under a name prefix.
#[derive(Clone)]
pub struct Scope<'a, T> {
    params: &'a BoundParams<T>,
    prefix: String,
}

impl<'a, T: Scalar> Scope<'a, T> {
    pub fn get(&self, name: &str) -> Result<&'a Var<T>> {
        self.params.var(&self.join(name))
    }

    pub fn sub(&self, name: &str) -> Scope<'a, T> {
        Scope {
            params: self.params,
            prefix: self.join(name),
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    fn join(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::preset;

    #[test]
    fn names_are_unique_and_breakdown_sums_to_total() {
        for name in ["tiny", "small", "base"] {
            for variant in [AttentionVariant::CswSa, AttentionVariant::SwSa] {
                let cfg = preset(name).unwrap().with_attention(variant);
                let specs = param_specs(&cfg);
                let mut names: Vec<_> = specs.iter().map(|s| s.name.clone()).collect();
                names.sort();
                names.dedup();
                assert_eq!(names.len(), specs.len());
                let total: usize = parameter_breakdown(&cfg).iter().map(|(_, n)| n).sum();
                assert_eq!(total, count_parameters(&cfg));
            }
        }
    }

    #[test]
    fn init_is_deterministic_and_matches_layout() {
        let mut cfg = preset("tiny").unwrap();
        cfg.stage_channels = [4, 8, 8, 16];
        cfg.embed_dim = 6;
        let a = NetworkParameters::<f32>::init(&cfg, 7);
        let b = NetworkParameters::<f32>::init(&cfg, 7);
        let c = NetworkParameters::<f32>::init(&cfg, 8);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.total_count(), count_parameters(&cfg));
        assert_eq!(a.get("stem.norm.gamma").unwrap().data(), &[1.0; 4]);
        assert!(a.get("head.bias").unwrap().data().iter().all(|&v| v == 0.0));
        let again = NetworkParameters::from_tensors(
            &cfg,
            a.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
        );
        assert_eq!(again.unwrap(), a);
    }

    #[test]
    fn from_tensors_rejects_wrong_shapes_and_names() {
        let mut cfg = preset("tiny").unwrap();
        cfg.stage_channels = [4, 8, 8, 16];
        cfg.embed_dim = 6;
        let p = NetworkParameters::<f32>::init(&cfg, 0);
        let mut map: BTreeMap<_, _> = p.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        map.insert("head.bias".into(), Tensor::zeros(vec![3]));
        assert!(NetworkParameters::from_tensors(&cfg, map.clone()).is_err());
        map.remove("head.bias");
        assert!(matches!(
            NetworkParameters::from_tensors(&cfg, map),
            Err(Error::MissingParameter(_))
        ));
    }

    #[test]
    fn scopes_join_names() {
        let mut cfg = preset("tiny").unwrap();
        cfg.stage_channels = [4, 8, 8, 16];
        cfg.embed_dim = 6;
        let p = NetworkParameters::<f64>::init(&cfg, 0);
        let g = Graph::new();
        let bound = p.bind(&g);
        let enc = bound.scope("encoder.2").sub("units.1");
        assert_eq!(enc.get("conv1.weight").unwrap().shape(), &[8, 3, 3, 3, 8]);
        assert!(enc.get("conv9.weight").is_err());
    }
}
