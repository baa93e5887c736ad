//! Encoder + decoder assembly, loss wiring and the parameter partition.

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamGroup, ParamStore, Var};
use crate::decoder::{Decoder, DecoderConfig, DecoderVars};
use crate::encoder::{Encoder, EncoderConfig, EncoderVars, ParamSink, ShapeCounter, StageFeatures, StoreSink};
use crate::error::Result;
use crate::head::PointPrompt;
use crate::objectives::{alignment_loss_graph, dice_loss_graph, AlignmentVars, LossConfig};
use crate::prompt_bank::TextEmbeddingPair;
use crate::volume::{MaskVolume, ModelInput};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn tiny() -> Self {
        ModelConfig {
            encoder: EncoderConfig::tiny(),
            decoder: DecoderConfig::tiny(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TagsModel {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub encoder: EncoderVars,
    pub decoder: DecoderVars,
}

#[derive(Debug, Clone)]
pub struct LossVars {
    pub forward: ForwardVars,
    pub alignment: AlignmentVars,
    pub dice: Var,
    pub total: Var,
}

impl TagsModel {
    pub fn declare(cfg: &ModelConfig, sink: &mut dyn ParamSink) -> Result<Self> {
        let encoder = Encoder::build(&cfg.encoder, sink)?;
        let decoder = Decoder::build(&cfg.encoder, &cfg.decoder, sink)?;
        Ok(TagsModel {
            cfg: cfg.clone(),
            encoder,
            decoder,
        })
    }

    /// Fresh weights drawn from a seeded generator.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Self::declare(cfg, &mut StoreSink { store: &mut store, rng: &mut rng })?;
        Ok((model, store))
    }

    pub fn forward(&self, g: &mut Graph<'_>, input: &ModelInput, points: &[PointPrompt]) -> Result<ForwardVars> {
        input.validate()?;
        let encoder = self.encoder.forward(g, input)?;
        let decoder = self.decoder.forward(g, &encoder.stage_outputs, input, points)?;
        Ok(ForwardVars { encoder, decoder })
    }

    /// `L = dice(y_hat, y) + l_a` on one patch.
    pub fn loss(
        &self,
        g: &mut Graph<'_>,
        input: &ModelInput,
        points: &[PointPrompt],
        y: &MaskVolume,
        text: &TextEmbeddingPair,
        cfg: &LossConfig,
    ) -> Result<LossVars> {
        let forward = self.forward(g, input, points)?;
        let alignment = alignment_loss_graph(g, &forward.encoder.adapter_outputs, forward.encoder.grid, text, y, cfg)?;
        let dice = dice_loss_graph(g, forward.decoder.probs, y, cfg);
        let total = g.add(dice, alignment.total);
        g.ensure_finite(total, "total loss")?;
        Ok(LossVars {
            forward,
            alignment,
            dice,
            total,
        })
    }

    /// Foreground probabilities on the input grid.
    pub fn predict(&self, store: &ParamStore, input: &ModelInput, points: &[PointPrompt]) -> Result<Array3<f64>> {
        let mut g = Graph::new(store);
        let f = self.forward(&mut g, input, points)?;
        Ok(Array3::from_shape_vec(input.shape(), g.value(f.decoder.probs).iter().copied().collect())
            .expect("one probability per voxel"))
    }

    /// Adapter outputs `A_s(F_s)` for the decoder-free prediction path.
    pub fn adapter_outputs(&self, store: &ParamStore, input: &ModelInput) -> Result<Vec<StageFeatures>> {
        Ok(self.encoder.forward_values(store, input)?.1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterPartition {
    pub trainable: Vec<ParamEntry>,
    pub frozen: Vec<ParamEntry>,
}

impl ParameterPartition {
    fn from_entries(entries: impl Iterator<Item = ParamEntry>) -> Self {
        let (trainable, frozen) = entries.partition(|e| e.group.trainable());
        ParameterPartition { trainable, frozen }
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable.iter().map(|e| e.count).sum()
    }

    pub fn frozen_count(&self) -> usize {
        self.frozen.iter().map(|e| e.count).sum()
    }

    pub fn count_where(&self, pred: impl Fn(&ParamEntry) -> bool) -> usize {
        self.trainable.iter().chain(&self.frozen).filter(|e| pred(e)).map(|e| e.count).sum()
    }

    pub fn trainable_fraction(&self) -> f64 {
        let t = self.trainable_count() as f64;
        t / (t + self.frozen_count() as f64)
    }
}

/// Partition of an instantiated store.
pub fn parameter_partition(store: &ParamStore) -> ParameterPartition {
    ParameterPartition::from_entries(store.iter().map(|(_, p)| ParamEntry {
        name: p.name.clone(),
        group: p.group,
        count: p.value.len(),
    }))
}

/// Partition computed from shapes alone, without allocating weights.
pub fn analytic_partition(cfg: &ModelConfig) -> Result<ParameterPartition> {
    let mut counter = ShapeCounter::default();
    TagsModel::declare(cfg, &mut counter)?;
    Ok(ParameterPartition::from_entries(counter.entries.into_iter().map(|(name, group, (r, c))| ParamEntry {
        name,
        group,
        count: r * c,
    })))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{AdamW, AdamWConfig};
    use crate::head::PointLabel;
    use crate::volume::{inject_organ_channel, Volume};
    use std::collections::HashSet;

    fn tiny_input() -> (ModelInput, MaskVolume) {
        let n = 32;
        let tumor = Array3::from_shape_fn((n, n, n), |(z, y, x)| {
            let d = [z, y, x].iter().map(|&c| (c as f64 - 15.5).powi(2)).sum::<f64>();
            u8::from(d < 36.0)
        });
        let organ = Array3::from_shape_fn((n, n, n), |(z, y, x)| {
            let d = [z, y, x].iter().map(|&c| (c as f64 - 15.5).powi(2)).sum::<f64>();
            u8::from(d < 169.0)
        });
        let img = Array3::from_shape_fn((n, n, n), |p| 0.1 + 0.35 * f64::from(organ[p]) + 0.35 * f64::from(tumor[p]));
        let img = Volume::new(img, [1.0; 3]).unwrap();
        let organ = MaskVolume::new(organ, [1.0; 3]).unwrap();
        (inject_organ_channel(&img, &organ).unwrap(), MaskVolume::new(tumor, [1.0; 3]).unwrap())
    }

    #[test]
    fn full_size_counts() {
        let p = analytic_partition(&ModelConfig::default()).unwrap();
        let align = p.count_where(|e| e.group == ParamGroup::AlignmentAdapter);
        assert_eq!(align, 4 * 768 * 768);
        let encoder_trainable = p.count_where(|e| e.group.trainable() && e.name.starts_with("encoder."));
        assert!((encoder_trainable as f64 - 27.82e6).abs() / 27.82e6 < 0.01, "{encoder_trainable}");
        let names: HashSet<_> = p.trainable.iter().chain(&p.frozen).map(|e| e.name.clone()).collect();
        assert_eq!(names.len(), p.trainable.len() + p.frozen.len());
        assert!(p.frozen.iter().all(|e| e.group == ParamGroup::Attention));
        assert!(p.frozen.iter().any(|e| e.name.ends_with("attn.qkv.weight")));
    }

    #[test]
    fn analytic_matches_instantiated() {
        let cfg = ModelConfig::tiny();
        let (_, store) = TagsModel::init(&cfg, 0).unwrap();
        assert_eq!(analytic_partition(&cfg).unwrap(), parameter_partition(&store));
    }

    #[test]
    fn decoder_output_contract() {
        let cfg = ModelConfig::tiny();
        let (model, store) = TagsModel::init(&cfg, 1).unwrap();
        let (input, _) = tiny_input();
        let p0 = model.predict(&store, &input, &[]).unwrap();
        assert_eq!(p0.dim(), (32, 32, 32));
        assert!(p0.iter().all(|v| (0.0..=1.0).contains(v)));
        let a = model.predict(&store, &input, &[PointPrompt::fg([16, 16, 16]), PointPrompt::bg([2, 3, 4])]).unwrap();
        let b = model.predict(&store, &input, &[PointPrompt::bg([2, 3, 4]), PointPrompt::fg([16, 16, 16])]).unwrap();
        assert_eq!(a, b);
        let c = model.predict(&store, &input, &[PointPrompt::bg([16, 16, 16]), PointPrompt::bg([2, 3, 4])]).unwrap();
        assert_ne!(a, c);
        assert_eq!(a, model.predict(&store, &input, &[PointPrompt::fg([16, 16, 16]), PointPrompt::bg([2, 3, 4])]).unwrap());
    }

    #[test]
    fn one_step_leaves_frozen_untouched() {
        let cfg = ModelConfig::tiny();
        let (model, mut store) = TagsModel::init(&cfg, 2).unwrap();
        let before = store.clone();
        let (input, y) = tiny_input();
        let text = TextEmbeddingPair {
            fg: (0..32).map(|i| (i as f64 * 0.3).sin()).collect(),
            bg: (0..32).map(|i| (i as f64 * 0.7).cos()).collect(),
        };
        let pts = [PointPrompt { coord: [16, 16, 16], label: PointLabel::Fg }];
        let grads = {
            let mut g = Graph::new(&store);
            let l = model.loss(&mut g, &input, &pts, &y, &text, &LossConfig::default()).unwrap();
            g.backward(l.total)
        };
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut store, &grads);
        for ((_, a), (_, b)) in before.iter().zip(store.iter()) {
            if a.group.trainable() {
                continue;
            }
            assert_eq!(a.value, b.value, "{}", a.name);
        }
        assert!(before.iter().zip(store.iter()).any(|((_, a), (_, b))| a.value != b.value));
    }
}
