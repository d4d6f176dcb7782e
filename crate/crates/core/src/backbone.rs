//! Dual composite backbone with optional deformable stages, and the feature
//! pyramid head on top of it.
//!
//! Both backbones share one stage geometry. The assistant runs first; lead
//! stage `l` then consumes its own previous output plus `g_l` applied to the
//! assistant's stage-`l` output, where `g_l` is a 1×1 projection onto the
//! lead stage's input width followed by a nearest-neighbour upsample to the
//! lead's resolution. `g_l` starts at zero, so a fresh composite model
//! computes exactly what the lead backbone computes alone.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::deform::{ConvLayer, DeformLayer};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::optim::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct StageSpec {
    pub out_channels: usize,
    pub num_blocks: usize,
    pub downsample: bool,
    pub deformable: bool,
}

impl StageSpec {
    pub fn validate(&self) -> Result<()> {
        if self.out_channels == 0 || self.num_blocks == 0 {
            return Err(Error::Config(format!("invalid stage {self:?}")));
        }
        Ok(())
    }
}

/// Default toy geometry: four downsampling stages, deformable on the top two.
pub fn default_stages() -> Vec<StageSpec> {
    [16, 32, 64, 128]
        .iter()
        .enumerate()
        .map(|(i, &c)| StageSpec {
            out_channels: c,
            num_blocks: 1,
            downsample: true,
            deformable: i >= 2,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Conv {
    Regular(ConvLayer),
    Deformable(DeformLayer),
}

impl Conv {
    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        match self {
            Conv::Regular(c) => c.forward(g, store, x),
            Conv::Deformable(d) => d.forward(g, store, x),
        }
    }
}

/// Residual block: `relu(conv₂(relu(conv₁(x))) + shortcut(x))`.
#[derive(Debug, Clone, PartialEq)]
struct Block {
    conv1: ConvLayer,
    conv2: Conv,
    shortcut: Option<ConvLayer>,
}

impl Block {
    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.conv1.forward(g, store, x)?;
        let h = g.relu(h);
        let y = self.conv2.forward(g, store, h)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(g, store, x)?,
            None => x,
        };
        let sum = g.add(y, skip)?;
        Ok(g.relu(sum))
    }
}

/// One backbone stage, `x^l = F^l(x^{l-1})`.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub spec: StageSpec,
    pub in_channels: usize,
    blocks: Vec<Block>,
}

impl Stage {
    pub fn new(store: &mut ParamStore, name: &str, in_channels: usize, spec: StageSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let mut blocks = Vec::with_capacity(spec.num_blocks);
        let mut c_in = in_channels;
        for b in 0..spec.num_blocks {
            let stride = if b == 0 && spec.downsample { 2 } else { 1 };
            let bn = format!("{name}.block{b}");
            let c_out = spec.out_channels;
            let conv1 = ConvLayer::new(store, &format!("{bn}.conv1"), c_in, c_out, 3, stride, rng);
            let c2 = ConvLayer::new(store, &format!("{bn}.conv2"), c_out, c_out, 3, 1, rng);
            let conv2 = if spec.deformable {
                Conv::Deformable(DeformLayer::new(store, &format!("{bn}.conv2"), c2))
            } else {
                Conv::Regular(c2)
            };
            let shortcut = (stride != 1 || c_in != c_out)
                .then(|| ConvLayer::new(store, &format!("{bn}.shortcut"), c_in, c_out, 1, stride, rng));
            blocks.push(Block { conv1, conv2, shortcut });
            c_in = c_out;
        }
        Ok(Self {
            spec,
            in_channels,
            blocks,
        })
    }

    pub fn stride(&self) -> usize {
        if self.spec.downsample {
            2
        } else {
            1
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let c = g.shape(x)[0];
        if c != self.in_channels {
            return Err(Error::ShapeMismatch {
                op: "stage input channels",
                lhs: alloc::vec![self.in_channels],
                rhs: g.shape(x).to_vec(),
            });
        }
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(g, store, h)?;
        }
        Ok(h)
    }
}

/// Stem (stride-2 3×3 conv) followed by the stage stack.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub stem: ConvLayer,
    pub stages: Vec<Stage>,
}

impl Backbone {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        stem_channels: usize,
        specs: &[StageSpec],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let stem = ConvLayer::new(store, &format!("{name}.stem"), in_channels, stem_channels, 3, 2, rng);
        let mut stages = Vec::with_capacity(specs.len());
        let mut c = stem_channels;
        for (l, spec) in specs.iter().enumerate() {
            stages.push(Stage::new(store, &format!("{name}.stage{}", l + 1), c, *spec, rng)?);
            c = spec.out_channels;
        }
        Ok(Self { stem, stages })
    }

    pub fn stem_forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let s = self.stem.forward(g, store, x)?;
        Ok(g.relu(s))
    }

    /// Plain single-backbone pass: one output per stage.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Vec<Var>> {
        let mut h = self.stem_forward(g, store, x)?;
        let mut outs = Vec::with_capacity(self.stages.len());
        for s in &self.stages {
            h = s.forward(g, store, h)?;
            outs.push(h);
        }
        Ok(outs)
    }

    /// Cumulative stride of every stage output relative to the input.
    pub fn strides(&self) -> Vec<usize> {
        let mut s = self.stem.stride;
        self.stages
            .iter()
            .map(|st| {
                s *= st.stride();
                s
            })
            .collect()
    }

    pub fn channels(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.spec.out_channels).collect()
    }
}

/// Assistant + lead backbones joined by composite connections.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeBackbone {
    pub lead: Backbone,
    pub assistant: Option<Backbone>,
    /// `g_l`: assistant stage-`l` width → lead stage-`l` input width.
    pub g_projections: Vec<ConvLayer>,
}

impl CompositeBackbone {
    /// Build the lead backbone and, when `composite` is set, the assistant
    /// and zero-initialised connections. Each part draws from its own RNG
    /// so toggling the composite leaves the lead's weights untouched.
    pub fn new(
        store: &mut ParamStore,
        in_channels: usize,
        stem_channels: usize,
        specs: &[StageSpec],
        composite: bool,
        lead_rng: &mut impl Rng,
        assistant_rng: &mut impl Rng,
    ) -> Result<Self> {
        let lead = Backbone::new(store, "lead", in_channels, stem_channels, specs, lead_rng)?;
        let (assistant, g_projections) = if composite {
            let a = Backbone::new(store, "assistant", in_channels, stem_channels, specs, assistant_rng)?;
            let g = lead
                .stages
                .iter()
                .enumerate()
                .map(|(l, s)| {
                    ConvLayer::zeros(store, &format!("composite.g{}", l + 1), s.spec.out_channels, s.in_channels, 1, 1)
                })
                .collect();
            (Some(a), g)
        } else {
            (None, Vec::new())
        };
        Ok(Self {
            lead,
            assistant,
            g_projections,
        })
    }

    pub fn enabled(&self) -> bool {
        self.assistant.is_some()
    }

    /// Per-stage lead outputs.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Vec<Var>> {
        let Some(assistant) = &self.assistant else {
            return self.lead.forward(g, store, x);
        };
        let helper = assistant.forward(g, store, x)?;
        let mut h = self.lead.stem_forward(g, store, x)?;
        let mut outs = Vec::with_capacity(self.lead.stages.len());
        for ((stage, proj), &xa) in self.lead.stages.iter().zip(&self.g_projections).zip(&helper) {
            let p = proj.forward(g, store, xa)?;
            let (hh, hw) = (g.shape(h)[1], g.shape(h)[2]);
            let p = g.resize_nearest(p, hh, hw)?;
            let input = g.add(h, p)?;
            h = stage.forward(g, store, input)?;
            outs.push(h);
        }
        Ok(outs)
    }

    pub fn strides(&self) -> Vec<usize> {
        self.lead.strides()
    }
}

/// Multi-resolution features, finest first.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
    pub strides: Vec<usize>,
}

/// Lateral 1×1 projections, top-down nearest upsampling with addition, and
/// a 3×3 smoothing conv per level.
#[derive(Debug, Clone, PartialEq)]
pub struct Fpn {
    pub laterals: Vec<ConvLayer>,
    pub smooth: Vec<ConvLayer>,
    pub width: usize,
}

impl Fpn {
    pub fn new(store: &mut ParamStore, in_channels: &[usize], width: usize, rng: &mut impl Rng) -> Result<Self> {
        if in_channels.len() < 2 {
            return Err(Error::Config("feature pyramid needs at least two levels".into()));
        }
        let laterals = in_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| ConvLayer::new(store, &format!("fpn.lateral{i}"), c, width, 1, 1, rng))
            .collect();
        let smooth = (0..in_channels.len())
            .map(|i| ConvLayer::new(store, &format!("fpn.smooth{i}"), width, width, 3, 1, rng))
            .collect();
        Ok(Self {
            laterals,
            smooth,
            width,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, stage_outputs: &[Var], strides: &[usize]) -> Result<FeaturePyramid> {
        if stage_outputs.len() < 2 || stage_outputs.len() != self.laterals.len() {
            return Err(Error::Config(format!(
                "feature pyramid expects {} levels (at least 2), got {}",
                self.laterals.len(),
                stage_outputs.len()
            )));
        }
        let mut lat: Vec<Var> = Vec::with_capacity(stage_outputs.len());
        for (l, &x) in self.laterals.iter().zip(stage_outputs) {
            lat.push(l.forward(g, store, x)?);
        }
        for i in (0..lat.len() - 1).rev() {
            let (h, w) = (g.shape(lat[i])[1], g.shape(lat[i])[2]);
            let up = g.resize_nearest(lat[i + 1], h, w)?;
            lat[i] = g.add(lat[i], up)?;
        }
        let mut levels = Vec::with_capacity(lat.len());
        for (s, &p) in self.smooth.iter().zip(&lat) {
            levels.push(s.forward(g, store, p)?);
        }
        Ok(FeaturePyramid {
            levels,
            strides: strides.to_vec(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::rand_tensor;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(s: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(s)
    }

    fn small_specs(deformable: bool) -> Vec<StageSpec> {
        [4, 6, 8]
            .iter()
            .map(|&c| StageSpec {
                out_channels: c,
                num_blocks: 1,
                downsample: true,
                deformable,
            })
            .collect()
    }

    #[test]
    fn non_downsampling_stage_keeps_shape() {
        let mut store = ParamStore::new();
        let spec = StageSpec {
            out_channels: 3,
            num_blocks: 2,
            downsample: false,
            deformable: false,
        };
        let st = Stage::new(&mut store, "s", 3, spec, &mut rng(0)).unwrap();
        let mut g = Graph::new();
        let x = g.constant(rand_tensor(&mut rng(1), &[3, 7, 5]));
        let y = st.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(y), &[3, 7, 5]);
    }

    #[test]
    fn downsampling_stage_halves() {
        let mut store = ParamStore::new();
        let spec = StageSpec {
            out_channels: 2,
            num_blocks: 1,
            downsample: true,
            deformable: false,
        };
        let st = Stage::new(&mut store, "s", 1, spec, &mut rng(0)).unwrap();
        let mut g = Graph::new();
        let x = g.constant(rand_tensor(&mut rng(1), &[1, 8, 8]));
        let y = st.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(y), &[2, 4, 4]);

        let bad = g.constant(Tensor::zeros(&[3, 8, 8]));
        assert!(st.forward(&mut g, &store, bad).is_err());
    }

    #[test]
    fn fresh_deformable_stage_equals_regular() {
        let spec = |d| StageSpec {
            out_channels: 4,
            num_blocks: 1,
            downsample: true,
            deformable: d,
        };
        let mut s1 = ParamStore::new();
        let a = Stage::new(&mut s1, "s", 2, spec(false), &mut rng(3)).unwrap();
        let mut s2 = ParamStore::new();
        let b = Stage::new(&mut s2, "s", 2, spec(true), &mut rng(3)).unwrap();
        let x = rand_tensor(&mut rng(4), &[2, 9, 7]);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let ya = a.forward(&mut g, &s1, xv).unwrap();
        let yb = b.forward(&mut g, &s2, xv).unwrap();
        assert_eq!(g.data(ya), g.data(yb));
    }

    #[test]
    fn stage_output_dims_follow_ceil_rule() {
        let mut store = ParamStore::new();
        let bb = Backbone::new(&mut store, "b", 1, 4, &small_specs(false), &mut rng(0)).unwrap();
        assert_eq!(bb.strides(), [4, 8, 16]);
        for (h, w) in [(33, 17), (32, 24), (5, 9)] {
            let mut g = Graph::new();
            let x = g.constant(rand_tensor(&mut rng(1), &[1, h, w]));
            let outs = bb.forward(&mut g, &store, x).unwrap();
            for (o, s) in outs.iter().zip(bb.strides()) {
                assert_eq!(g.shape(*o)[1..], [h.div_ceil(s), w.div_ceil(s)]);
            }
        }
    }

    fn composite_pair(deformable: bool) -> (ParamStore, CompositeBackbone, ParamStore, CompositeBackbone) {
        let specs = small_specs(deformable);
        let mut s_on = ParamStore::new();
        let on = CompositeBackbone::new(&mut s_on, 1, 4, &specs, true, &mut rng(1), &mut rng(2)).unwrap();
        let mut s_off = ParamStore::new();
        let off = CompositeBackbone::new(&mut s_off, 1, 4, &specs, false, &mut rng(1), &mut rng(2)).unwrap();
        (s_on, on, s_off, off)
    }

    #[test]
    fn zero_g_composite_equals_lead_alone() {
        let (s_on, on, s_off, off) = composite_pair(true);
        for seed in 0..5 {
            let x = rand_tensor(&mut rng(100 + seed), &[1, 21, 14]);
            let mut g = Graph::new();
            let xv = g.constant(x);
            let a = on.forward(&mut g, &s_on, xv).unwrap();
            let b = off.forward(&mut g, &s_off, xv).unwrap();
            let single = off.lead.forward(&mut g, &s_off, xv).unwrap();
            for ((p, q), r) in a.iter().zip(&b).zip(&single) {
                assert_eq!(g.data(*p), g.data(*q));
                assert_eq!(g.data(*q), g.data(*r));
            }
        }
    }

    fn randomize_g(store: &mut ParamStore, cb: &CompositeBackbone, seed: u64) {
        let mut r = rng(seed);
        for p in &cb.g_projections {
            for v in store.get_mut(p.weight).data_mut() {
                *v = r.gen_range(-0.5..0.5);
            }
        }
    }

    #[test]
    fn assistant_weights_reach_lead_outputs() {
        let (mut store, cb, _, _) = composite_pair(false);
        randomize_g(&mut store, &cb, 7);
        let x = rand_tensor(&mut rng(8), &[1, 16, 16]);
        let run = |store: &ParamStore| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let outs = cb.forward(&mut g, store, xv).unwrap();
            outs.iter().map(|o| g.data(*o).to_vec()).collect::<Vec<_>>()
        };
        let before = run(&store);
        // perturb the assistant's last stage
        let asst = cb.assistant.as_ref().unwrap();
        let id = store.find("assistant.stage3.block0.conv2.w").unwrap();
        assert!(asst.stages.len() == 3);
        let mut r = rng(10);
        for v in store.get_mut(id).data_mut() {
            *v += r.gen_range(-0.5..0.5);
        }
        let after = run(&store);
        assert_eq!(before[0], after[0]);
        assert_eq!(before[1], after[1]);
        assert_ne!(before[2], after[2]);
    }

    #[test]
    fn gradient_reaches_assistant() {
        let (mut store, cb, _, _) = composite_pair(false);
        let x = rand_tensor(&mut rng(9), &[1, 16, 16]);
        let step = |store: &mut ParamStore| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let outs = cb.forward(&mut g, store, xv).unwrap();
            let sq = g.mul(outs[2], outs[2]).unwrap();
            let loss = g.sum(sq);
            store.zero_grad();
            g.backward(loss).unwrap();
            g.accumulate_into(store);
        };
        let assistant_grad = |store: &ParamStore| -> f64 {
            store
                .iter()
                .filter(|(n, _)| n.starts_with("assistant"))
                .flat_map(|(_, t)| t.grad.clone().unwrap_or_default())
                .map(f64::abs)
                .sum()
        };
        step(&mut store);
        // zero g blocks the path on the very first pass; one update opens it
        assert_eq!(assistant_grad(&store), 0.0);
        crate::optim::Sgd::new(0.0).step_store(&mut store, 0.1).unwrap();
        step(&mut store);
        assert!(assistant_grad(&store) > 0.0);
    }

    #[test]
    fn fpn_contracts() {
        let mut store = ParamStore::new();
        let fpn = Fpn::new(&mut store, &[4, 8], 5, &mut rng(0)).unwrap();
        let mut g = Graph::new();
        let a = g.constant(rand_tensor(&mut rng(1), &[4, 8, 6]));
        let b = g.constant(rand_tensor(&mut rng(2), &[8, 4, 3]));
        let pyr = fpn.forward(&mut g, &store, &[a, b], &[8, 16]).unwrap();
        assert_eq!(pyr.strides, [8, 16]);
        assert_eq!(g.shape(pyr.levels[0]), &[5, 8, 6]);
        assert_eq!(g.shape(pyr.levels[1]), &[5, 4, 3]);
        assert!(fpn.forward(&mut g, &store, &[a], &[8]).is_err());
        assert!(Fpn::new(&mut store, &[4], 5, &mut rng(0)).is_err());

        // zero laterals and zero biases → zero pyramid
        for l in &fpn.laterals {
            store.get_mut(l.weight).data_mut().fill(0.0);
        }
        let pyr = fpn.forward(&mut g, &store, &[a, b], &[8, 16]).unwrap();
        for l in pyr.levels {
            assert!(g.data(l).iter().all(|&v| v == 0.0));
        }
    }
}
