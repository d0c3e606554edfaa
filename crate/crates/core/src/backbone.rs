//! Shared encoder: strided stem, grouped-convolution aggregation stages,
//! spatial pyramid pooling on the deepest stage and a top-down pyramid.

use rand::Rng;

use crate::autograd::{Graph, ParamStore, Var};
use crate::config::{check_input_size, ModelConfig, STRIDES};
use crate::error::{Error, Result};
use crate::nn::ConvBnAct;
use crate::tensor::Element;

/// A feature map living on a graph, with its stride relative to the input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureMap {
    pub var: Var,
    pub stride: usize,
}

impl FeatureMap {
    pub fn new(var: Var, stride: usize) -> Self {
        Self { var, stride }
    }

    /// `(batch, channels, height, width)`.
    pub fn dims<T: Element>(&self, g: &Graph<T>) -> (usize, usize, usize, usize) {
        g.value(self.var).dims4()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PyramidFeatures {
    /// Strides 8, 16, 32.
    pub levels: [FeatureMap; 3],
    /// The stride-8 stage output, taken before any top-down fusion.
    pub pre_fpn_tap: FeatureMap,
}

/// Aggregation block with grouped 3×3 branches.
///
/// Two 1×1 entry projections split the input into `mid = out/2` channels.
/// One path runs through a chain of grouped 3×3 convolutions (each followed
/// by a channel shuffle so groups exchange information); every intermediate
/// result is concatenated with the entry paths and merged by a 1×1
/// projection to `out_channels`.
#[derive(Debug, Clone)]
pub struct ElanBlock {
    pub entry_short: ConvBnAct,
    pub entry_long: ConvBnAct,
    pub branch: Vec<ConvBnAct>,
    pub merge: ConvBnAct,
    pub groups: usize,
}

impl ElanBlock {
    pub fn new<T: Element, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        groups: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if groups == 0 || in_channels % groups != 0 {
            return Err(Error::Config(format!(
                "{name}: {in_channels} input channels not divisible by {groups} groups"
            )));
        }
        let mid = out_channels / 2;
        if mid == 0 || out_channels % 2 != 0 || mid % groups != 0 {
            return Err(Error::Config(format!(
                "{name}: {out_channels} output channels cannot be split into {groups} groups"
            )));
        }
        let entry_short = ConvBnAct::new(store, &format!("{name}.short"), in_channels, mid, 1, 1, 1, rng);
        let entry_long = ConvBnAct::new(store, &format!("{name}.long"), in_channels, mid, 1, 1, 1, rng);
        let branch = (0..2)
            .map(|i| ConvBnAct::new(store, &format!("{name}.branch{i}"), mid, mid, 3, 1, groups, rng))
            .collect();
        let merge = ConvBnAct::new(store, &format!("{name}.merge"), 4 * mid, out_channels, 1, 1, 1, rng);
        Ok(Self {
            entry_short,
            entry_long,
            branch,
            merge,
            groups,
        })
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, x: FeatureMap) -> FeatureMap {
        let short = self.entry_short.forward(g, x.var);
        let mut cur = self.entry_long.forward(g, x.var);
        let mut parts = vec![short, cur];
        for conv in &self.branch {
            cur = conv.forward(g, cur);
            if self.groups > 1 {
                cur = g.channel_shuffle(cur, self.groups);
            }
            parts.push(cur);
        }
        let cat = g.concat(&parts);
        FeatureMap::new(self.merge.forward(g, cat), x.stride)
    }

    /// Weight count of the grouped branch (biases excluded).
    pub fn branch_weight_count(&self) -> usize {
        self.branch.iter().map(|c| c.conv.weight_count()).sum()
    }
}

/// Identity plus same-padded max pools at several kernel sizes, concatenated
/// and projected by a 1×1 convolution.
#[derive(Debug, Clone)]
pub struct Spp {
    pub kernels: Vec<usize>,
    pub project: ConvBnAct,
}

impl Spp {
    pub fn new<T: Element, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernels: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        if let Some(&k) = kernels.iter().find(|&&k| k == 0 || k % 2 == 0) {
            return Err(Error::Config(format!("{name}: pooling kernel {k} must be odd and >= 1")));
        }
        let project = ConvBnAct::new(
            store,
            &format!("{name}.project"),
            in_channels * (kernels.len() + 1),
            out_channels,
            1,
            1,
            1,
            rng,
        );
        Ok(Self {
            kernels: kernels.to_vec(),
            project,
        })
    }

    /// The identity branch followed by one pooled map per kernel.
    pub fn branches<T: Element>(&self, g: &mut Graph<T>, x: Var) -> Vec<Var> {
        let mut parts = vec![x];
        for &k in &self.kernels {
            parts.push(g.max_pool_same(x, k));
        }
        parts
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, x: FeatureMap) -> FeatureMap {
        let parts = self.branches(g, x.var);
        let cat = g.concat(&parts);
        FeatureMap::new(self.project.forward(g, cat), x.stride)
    }
}

/// Top-down pyramid over strides 8/16/32.
#[derive(Debug, Clone)]
pub struct Fpn {
    reduce_deep: ConvBnAct,
    lateral_mid: ConvBnAct,
    merge_mid: ConvBnAct,
    reduce_mid: ConvBnAct,
    lateral_shallow: ConvBnAct,
    merge_shallow: ConvBnAct,
}

impl Fpn {
    /// `in_channels` and `out_channels` are per level, shallowest first.
    pub fn new<T: Element, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: [usize; 3],
        out_channels: [usize; 3],
        rng: &mut R,
    ) -> Self {
        let [c3, c4, _] = in_channels;
        let [n3, n4, n5] = out_channels;
        Self {
            reduce_deep: ConvBnAct::new(store, &format!("{name}.reduce5"), n5, n4, 1, 1, 1, rng),
            lateral_mid: ConvBnAct::new(store, &format!("{name}.lateral4"), c4, n4, 1, 1, 1, rng),
            merge_mid: ConvBnAct::new(store, &format!("{name}.merge4"), 2 * n4, n4, 3, 1, 1, rng),
            reduce_mid: ConvBnAct::new(store, &format!("{name}.reduce4"), n4, n3, 1, 1, 1, rng),
            lateral_shallow: ConvBnAct::new(store, &format!("{name}.lateral3"), c3, n3, 1, 1, 1, rng),
            merge_shallow: ConvBnAct::new(store, &format!("{name}.merge3"), 2 * n3, n3, 3, 1, 1, rng),
        }
    }

    /// Fuse stage features (strides 8, 16, 32; deepest already pooled).
    pub fn forward<T: Element>(&self, g: &mut Graph<T>, stage_feats: &[FeatureMap]) -> Result<PyramidFeatures> {
        if stage_feats.len() != STRIDES.len() {
            return Err(Error::Structure(format!(
                "pyramid fusion needs {} levels, got {}",
                STRIDES.len(),
                stage_feats.len()
            )));
        }
        check_strides(g, stage_feats)?;
        let (s3, s4, s5) = (stage_feats[0], stage_feats[1], stage_feats[2]);

        let deep = self.reduce_deep.forward(g, s5.var);
        let up = g.upsample_nearest(deep, 2);
        let lat = self.lateral_mid.forward(g, s4.var);
        let cat = g.concat(&[up, lat]);
        let p4 = self.merge_mid.forward(g, cat);

        let mid = self.reduce_mid.forward(g, p4);
        let up = g.upsample_nearest(mid, 2);
        let lat = self.lateral_shallow.forward(g, s3.var);
        let cat = g.concat(&[up, lat]);
        let p3 = self.merge_shallow.forward(g, cat);

        Ok(PyramidFeatures {
            levels: [
                FeatureMap::new(p3, s3.stride),
                FeatureMap::new(p4, s4.stride),
                FeatureMap::new(s5.var, s5.stride),
            ],
            pre_fpn_tap: s3,
        })
    }
}

/// Consecutive levels must double in stride and halve in grid size.
pub(crate) fn check_strides<T: Element>(g: &Graph<T>, levels: &[FeatureMap]) -> Result<()> {
    for pair in levels.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let (_, _, ah, aw) = a.dims(g);
        let (_, _, bh, bw) = b.dims(g);
        if b.stride != 2 * a.stride || ah != 2 * bh || aw != 2 * bw {
            return Err(Error::Structure(format!(
                "levels at stride {} ({ah}x{aw}) and {} ({bh}x{bw}) are not a x2 pair",
                a.stride, b.stride
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub down: ConvBnAct,
    pub blocks: Vec<ElanBlock>,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub stem: ConvBnAct,
    pub stages: Vec<Stage>,
    pub spp: Spp,
    pub fpn: Fpn,
    /// Channels of the pyramid outputs, shallowest first.
    pub neck_channels: [usize; 3],
}

impl Encoder {
    pub fn new<T: Element, R: Rng>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let ch = &cfg.stage_channels;
        let stem_out = ch[0] / 2;
        let stem = ConvBnAct::new(store, "stem", 3, stem_out, 3, 2, 1, rng);
        let mut stages = Vec::new();
        let mut prev = stem_out;
        for (i, &c) in ch.iter().enumerate() {
            let down = ConvBnAct::new(store, &format!("stage{i}.down"), prev, c, 3, 2, 1, rng);
            let blocks = (0..cfg.blocks_per_stage)
                .map(|b| ElanBlock::new(store, &format!("stage{i}.elan{b}"), c, c, cfg.group_count, rng))
                .collect::<Result<Vec<_>>>()?;
            stages.push(Stage { down, blocks });
            prev = c;
        }
        let neck_channels = [ch[1] / 2, ch[2] / 2, ch[3] / 2];
        let spp = Spp::new(store, "spp", ch[3], neck_channels[2], &cfg.spp_kernels, rng)?;
        let fpn = Fpn::new(store, "fpn", [ch[1], ch[2], ch[3]], neck_channels, rng);
        Ok(Self {
            stem,
            stages,
            spp,
            fpn,
            neck_channels,
        })
    }

    /// Stage outputs at strides 4, 8, 16, 32 (before pooling / fusion).
    pub fn stage_features<T: Element>(&self, g: &mut Graph<T>, image: Var) -> Result<Vec<FeatureMap>> {
        let (_, c, h, w) = g.value(image).dims4();
        if c != 3 {
            return Err(Error::Input(format!("expected 3 image channels, got {c}")));
        }
        check_input_size(w, h)?;
        let mut x = FeatureMap::new(self.stem.forward(g, image), 2);
        let mut out = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            x = FeatureMap::new(stage.down.forward(g, x.var), x.stride * 2);
            for block in &stage.blocks {
                x = block.forward(g, x);
            }
            out.push(x);
        }
        Ok(out)
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, image: Var) -> Result<PyramidFeatures> {
        let stages = self.stage_features(g, image)?;
        let deep = self.spp.forward(g, stages[3]);
        self.fpn.forward(g, &[stages[1], stages[2], deep])
    }
}
