use super::ResNetError;
use crate::signal::NUM_CLASSES;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Basic,
    Bottleneck,
}

impl BlockKind {
    /// Output channels of a block as a multiple of its stage width.
    pub fn expansion(&self) -> usize {
        match self {
            BlockKind::Basic => 1,
            BlockKind::Bottleneck => 4,
        }
    }

    /// Convolutions on the main path of one block.
    pub fn convs_per_block(&self) -> usize {
        match self {
            BlockKind::Basic => 2,
            BlockKind::Bottleneck => 3,
        }
    }

    fn as_str(&self) -> &'static str {
        match self {
            BlockKind::Basic => "basic",
            BlockKind::Bottleneck => "bottleneck",
        }
    }
}

/// Architecture description. Stage i runs at width stem_channels * 2^i;
/// every stage after the first opens with a stride-2 block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResNetSpec {
    pub stem_channels: usize,
    pub stage_block_counts: Vec<usize>,
    pub block_kind: BlockKind,
    pub num_classes: usize,
    /// (channels, height, width) of one input image.
    pub input_shape: (usize, usize, usize),
}

impl ResNetSpec {
    /// Small default: trains on a single core in minutes. The classic
    /// layouts below are buildable and shape-tested but not the default.
    pub fn tiny() -> Self {
        ResNetSpec {
            stem_channels: 16,
            stage_block_counts: vec![1, 1, 1, 1],
            block_kind: BlockKind::Basic,
            num_classes: NUM_CLASSES,
            input_shape: (1, 64, 64),
        }
    }

    pub fn resnet18() -> Self {
        ResNetSpec {
            stem_channels: 64,
            stage_block_counts: vec![2, 2, 2, 2],
            block_kind: BlockKind::Basic,
            ..Self::tiny()
        }
    }

    pub fn resnet34() -> Self {
        ResNetSpec {
            stem_channels: 64,
            stage_block_counts: vec![3, 4, 6, 3],
            block_kind: BlockKind::Basic,
            ..Self::tiny()
        }
    }

    pub fn resnet50() -> Self {
        ResNetSpec {
            stem_channels: 64,
            stage_block_counts: vec![3, 4, 6, 3],
            block_kind: BlockKind::Bottleneck,
            ..Self::tiny()
        }
    }

    pub fn by_name(name: &str) -> Result<Self, ResNetError> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "resnet18" => Ok(Self::resnet18()),
            "resnet34" => Ok(Self::resnet34()),
            "resnet50" => Ok(Self::resnet50()),
            other => Err(ResNetError::BadSpec(format!(
                "unknown architecture {other:?}; expected tiny, resnet18, resnet34, or resnet50"
            ))),
        }
    }

    pub fn validate(&self) -> Result<(), ResNetError> {
        if self.stage_block_counts.is_empty() {
            return Err(ResNetError::BadSpec("no stages".into()));
        }
        if self.stage_block_counts.iter().any(|&c| c == 0) {
            return Err(ResNetError::BadSpec("every stage needs at least one block".into()));
        }
        if self.stem_channels == 0 {
            return Err(ResNetError::BadSpec("stem_channels must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(ResNetError::BadSpec("need at least two classes".into()));
        }
        let (c, h, w) = self.input_shape;
        if c == 0 || h < 8 || w < 8 {
            return Err(ResNetError::BadSpec(format!(
                "input shape {c}x{h}x{w} too small for the 7x7 stride-2 stem"
            )));
        }
        Ok(())
    }

    /// Named-layer accounting in the conventional style: main-path convs
    /// plus the stem conv and the final fully connected layer. Projections
    /// and pooling are not counted.
    pub fn conv_layer_count(&self) -> usize {
        let blocks: usize = self.stage_block_counts.iter().sum();
        blocks * self.block_kind.convs_per_block() + 2
    }

    /// One line per field, fixed order; `parse` inverts it exactly. This
    /// text names the architecture inside checkpoint files.
    pub fn canonical_text(&self) -> String {
        let stages: Vec<String> = self.stage_block_counts.iter().map(|c| c.to_string()).collect();
        format!(
            "stem={}\nstages={}\nblock={}\nclasses={}\ninput={}x{}x{}\n",
            self.stem_channels,
            stages.join(","),
            self.block_kind.as_str(),
            self.num_classes,
            self.input_shape.0,
            self.input_shape.1,
            self.input_shape.2,
        )
    }

    pub fn parse(text: &str) -> Result<Self, ResNetError> {
        let bad = |reason: String| ResNetError::BadSpec(reason);
        let mut stem = None;
        let mut stages = None;
        let mut block = None;
        let mut classes = None;
        let mut input = None;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("expected key=value, got {line:?}")))?;
            match key {
                "stem" => {
                    stem = Some(value.parse::<usize>().map_err(|e| bad(format!("stem: {e}")))?)
                }
                "stages" => {
                    let counts: Result<Vec<usize>, _> =
                        value.split(',').map(|v| v.parse::<usize>()).collect();
                    stages = Some(counts.map_err(|e| bad(format!("stages: {e}")))?);
                }
                "block" => {
                    block = Some(match value {
                        "basic" => BlockKind::Basic,
                        "bottleneck" => BlockKind::Bottleneck,
                        other => return Err(bad(format!("unknown block kind {other:?}"))),
                    })
                }
                "classes" => {
                    classes =
                        Some(value.parse::<usize>().map_err(|e| bad(format!("classes: {e}")))?)
                }
                "input" => {
                    let dims: Result<Vec<usize>, _> =
                        value.split('x').map(|v| v.parse::<usize>()).collect();
                    let dims = dims.map_err(|e| bad(format!("input: {e}")))?;
                    if dims.len() != 3 {
                        return Err(bad(format!("input must be CxHxW, got {value:?}")));
                    }
                    input = Some((dims[0], dims[1], dims[2]));
                }
                other => return Err(bad(format!("unknown spec key {other:?}"))),
            }
        }
        let spec = ResNetSpec {
            stem_channels: stem.ok_or_else(|| bad("missing stem".into()))?,
            stage_block_counts: stages.ok_or_else(|| bad("missing stages".into()))?,
            block_kind: block.ok_or_else(|| bad("missing block".into()))?,
            num_classes: classes.ok_or_else(|| bad("missing classes".into()))?,
            input_shape: input.ok_or_else(|| bad("missing input".into()))?,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Width (pre-expansion) of one stage.
    pub(crate) fn stage_width(&self, stage: usize) -> usize {
        self.stem_channels << stage
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_accounting_matches_the_classic_names() {
        assert_eq!(ResNetSpec::resnet18().conv_layer_count(), 18);
        assert_eq!(ResNetSpec::resnet34().conv_layer_count(), 34);
        assert_eq!(ResNetSpec::resnet50().conv_layer_count(), 50);
        assert_eq!(ResNetSpec::tiny().conv_layer_count(), 10);
    }

    #[test]
    fn canonical_text_round_trips_every_named_layout() {
        for name in ["tiny", "resnet18", "resnet34", "resnet50"] {
            let spec = ResNetSpec::by_name(name).unwrap();
            assert_eq!(ResNetSpec::parse(&spec.canonical_text()).unwrap(), spec);
        }
    }

    #[test]
    fn unknown_keys_and_empty_stages_are_rejected() {
        assert!(matches!(
            ResNetSpec::parse("stem=16\nwhat=3\n"),
            Err(ResNetError::BadSpec(_))
        ));
        let mut spec = ResNetSpec::tiny();
        spec.stage_block_counts.clear();
        assert!(spec.validate().is_err());
        spec.stage_block_counts = vec![1, 0];
        assert!(spec.validate().is_err());
    }

    #[test]
    fn unknown_architecture_name_is_rejected() {
        assert!(ResNetSpec::by_name("resnet101").is_err());
    }
}
