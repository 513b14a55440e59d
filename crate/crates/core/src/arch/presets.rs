//! Built-in configurations: roughly one-million-parameter reference models
//! and small toy models for desk-scale runs.

use super::{BodyKind, Bottleneck, EncoderConnection, Hierarchy, ModelConfig};
use crate::attention::{AttentionConfig, AttentionKind};

fn base(
    body: BodyKind,
    depths: &[usize],
    channels: usize,
    ffn_hidden: usize,
    attention: AttentionConfig,
) -> ModelConfig {
    ModelConfig {
        body,
        depths: depths.to_vec(),
        channels,
        ffn_hidden,
        attention,
        hierarchy: Hierarchy::None,
        encoder_connection: EncoderConnection::None,
        bottleneck: Bottleneck::Plain,
        tail_layers: 2,
        tail_kernel: 3,
        in_channels: 3,
        ffn: None,
        norm: None,
    }
}

fn attn(kind: AttentionKind, heads: usize, window: usize) -> AttentionConfig {
    AttentionConfig::new(kind, heads, window)
}

fn symmetric(mut c: ModelConfig) -> ModelConfig {
    c.hierarchy = Hierarchy::Symmetric;
    c
}

fn ngswin_style(mut c: ModelConfig) -> ModelConfig {
    c.hierarchy = Hierarchy::Asymmetric;
    c.encoder_connection = EncoderConnection::Dense;
    c.bottleneck = Bottleneck::Scdp;
    c
}

/// Reference lightweight configuration of each body.
pub fn reference(body: BodyKind) -> ModelConfig {
    match body {
        BodyKind::Swinir => base(
            body,
            &[6, 6, 6, 6],
            60,
            120,
            attn(AttentionKind::PlainWindow, 6, 8),
        ),
        BodyKind::Elan => {
            let mut a = attn(AttentionKind::MultiscaleWindow, 1, 8);
            a.scales = vec![4, 8, 16];
            a.qk_shared = true;
            a.score_shared = true;
            base(body, &[5, 5, 4, 4], 60, 120, a)
        }
        BodyKind::Ngswin => {
            let mut a = attn(AttentionKind::NgramWindow, 2, 8);
            a.ngram = 2;
            ngswin_style(base(body, &[6, 4, 6, 5, 6], 16, 32, a))
        }
        BodyKind::Restormer => {
            let mut a = attn(AttentionKind::Channel, 1, 1);
            a.qkv_dwconv = true;
            symmetric(base(body, &[2; 8], 16, 32, a))
        }
        BodyKind::Uformer => symmetric(base(
            body,
            &[2, 4, 2, 2, 2, 4, 2],
            16,
            32,
            attn(AttentionKind::PlainWindow, 1, 8),
        )),
        BodyKind::Cat => {
            let mut a = attn(AttentionKind::RectWindow, 1, 8);
            a.rect = Some([4, 16]);
            symmetric(base(body, &[2, 2, 4, 2, 4, 2, 2, 2], 16, 32, a))
        }
        BodyKind::Art => {
            let mut a = attn(AttentionKind::SparseDenseWindow, 6, 8);
            a.dilation = 4;
            base(body, &[6, 6, 6, 6, 6], 60, 120, a)
        }
    }
}

/// Reported parameter budget of each reference model.
pub fn reference_param_target(body: BodyKind) -> usize {
    match body {
        BodyKind::Swinir => 905_000,
        BodyKind::Elan => 616_000,
        BodyKind::Ngswin => 993_000,
        BodyKind::Restormer => 1_054_000,
        BodyKind::Uformer => 1_084_000,
        BodyKind::Cat => 1_042_000,
        BodyKind::Art => 1_084_000,
    }
}

/// Small configuration of each body for minute-scale CPU training.
pub fn toy(body: BodyKind) -> ModelConfig {
    match body {
        BodyKind::Swinir => base(
            body,
            &[2, 2],
            16,
            32,
            attn(AttentionKind::PlainWindow, 2, 8),
        ),
        BodyKind::Elan => {
            let mut a = attn(AttentionKind::MultiscaleWindow, 1, 8);
            a.scales = vec![4, 8];
            a.qk_shared = true;
            a.score_shared = true;
            base(body, &[2, 2], 16, 32, a)
        }
        BodyKind::Ngswin => {
            let mut a = attn(AttentionKind::NgramWindow, 1, 8);
            a.ngram = 1;
            ngswin_style(base(body, &[1, 1, 1, 2], 8, 16, a))
        }
        BodyKind::Restormer => symmetric(base(
            body,
            &[1, 1, 1, 1],
            16,
            32,
            attn(AttentionKind::Channel, 1, 1),
        )),
        BodyKind::Uformer => symmetric(base(
            body,
            &[1, 1, 1, 1, 1],
            8,
            16,
            attn(AttentionKind::PlainWindow, 1, 8),
        )),
        BodyKind::Cat => {
            let mut a = attn(AttentionKind::RectWindow, 1, 8);
            a.rect = Some([4, 8]);
            symmetric(base(body, &[1, 1, 1, 1], 16, 32, a))
        }
        BodyKind::Art => {
            let mut a = attn(AttentionKind::SparseDenseWindow, 2, 8);
            a.dilation = 2;
            base(body, &[2, 2], 16, 32, a)
        }
    }
}

/// Looks up `"<body>"` or `"<body>-light"` (reference) and `"<body>-toy"`.
pub fn by_name(name: &str) -> Option<ModelConfig> {
    let (stem, toy_cfg) = match name.strip_suffix("-toy") {
        Some(s) => (s, true),
        None => (name.strip_suffix("-light").unwrap_or(name), false),
    };
    let body = BodyKind::ALL.into_iter().find(|b| b.name() == stem)?;
    Some(if toy_cfg { toy(body) } else { reference(body) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for b in BodyKind::ALL {
            reference(b).validate().unwrap();
            toy(b).validate().unwrap();
            assert_eq!(by_name(&format!("{}-toy", b.name())), Some(toy(b)));
            assert_eq!(by_name(b.name()), Some(reference(b)));
        }
        assert!(by_name("unknown").is_none());
    }
}
