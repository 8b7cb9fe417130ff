use std::fmt;
use std::str::FromStr;

use crate::data::{toy_vocabulary, TOY_IMAGE_SIZE, TOY_PATCH};
use crate::error::{invalid, Error, Result};
use crate::model::ModelConfig;

/// Vocabulary size of the full-size text decoders.
pub const FULL_VOCAB: usize = 30552;
/// Positional table length of the full-size text decoders.
pub const FULL_MAX_TEXT_LEN: usize = 512;
/// Positional table length of the toy decoders.
pub const TOY_MAX_TEXT_LEN: usize = 24;
/// Classes predicted by the distilled encoder's distillation head.
pub const DISTILL_HEAD_CLASSES: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PresetName {
    VitBase,
    DeitBase,
    DeitTiny,
    DeitTinyDistilled,
    BertBaseDec,
    TinybertDec,
    TransformerTinyDec,
    ToyTeacherEnc,
    ToyStudentEnc,
    ToyTeacherDec,
    ToyStudentDec,
}

impl PresetName {
    pub const ALL: [PresetName; 11] = [
        PresetName::VitBase,
        PresetName::DeitBase,
        PresetName::DeitTiny,
        PresetName::DeitTinyDistilled,
        PresetName::BertBaseDec,
        PresetName::TinybertDec,
        PresetName::TransformerTinyDec,
        PresetName::ToyTeacherEnc,
        PresetName::ToyStudentEnc,
        PresetName::ToyTeacherDec,
        PresetName::ToyStudentDec,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PresetName::VitBase => "vit_base",
            PresetName::DeitBase => "deit_base",
            PresetName::DeitTiny => "deit_tiny",
            PresetName::DeitTinyDistilled => "deit_tiny_distilled",
            PresetName::BertBaseDec => "bert_base_dec",
            PresetName::TinybertDec => "tinybert_dec",
            PresetName::TransformerTinyDec => "transformer_tiny_dec",
            PresetName::ToyTeacherEnc => "toy_teacher_enc",
            PresetName::ToyStudentEnc => "toy_student_enc",
            PresetName::ToyTeacherDec => "toy_teacher_dec",
            PresetName::ToyStudentDec => "toy_student_dec",
        }
    }

    pub fn config(self) -> ModelConfig {
        let toy_vocab = toy_vocabulary().len();
        match self {
            PresetName::VitBase | PresetName::DeitBase => ModelConfig::encoder(768, 12, 12, 224, 16),
            PresetName::DeitTiny => ModelConfig::encoder(192, 12, 3, 224, 16),
            PresetName::DeitTinyDistilled => ModelConfig {
                use_distillation_token: true,
                distill_classes: DISTILL_HEAD_CLASSES,
                ..ModelConfig::encoder(192, 12, 3, 224, 16)
            },
            PresetName::BertBaseDec => ModelConfig {
                tie_word_embeddings: true,
                ..ModelConfig::decoder(768, 12, 12, FULL_VOCAB, FULL_MAX_TEXT_LEN)
            },
            PresetName::TinybertDec => ModelConfig {
                mlp_hidden: 1200,
                tie_word_embeddings: true,
                ..ModelConfig::decoder(312, 4, 12, FULL_VOCAB, FULL_MAX_TEXT_LEN)
            },
            PresetName::TransformerTinyDec => ModelConfig {
                tie_word_embeddings: true,
                ..ModelConfig::decoder(128, 2, 2, FULL_VOCAB, FULL_MAX_TEXT_LEN)
            },
            PresetName::ToyTeacherEnc => ModelConfig::encoder(128, 4, 4, TOY_IMAGE_SIZE, TOY_PATCH),
            PresetName::ToyStudentEnc => ModelConfig::encoder(32, 2, 2, TOY_IMAGE_SIZE, TOY_PATCH),
            PresetName::ToyTeacherDec => ModelConfig::decoder(128, 4, 4, toy_vocab, TOY_MAX_TEXT_LEN),
            PresetName::ToyStudentDec => ModelConfig::decoder(32, 2, 2, toy_vocab, TOY_MAX_TEXT_LEN),
        }
    }
}

impl fmt::Display for PresetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PresetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PresetName::ALL.into_iter().find(|p| p.as_str() == s).ok_or_else(|| {
            let names: Vec<&str> = PresetName::ALL.iter().map(|p| p.as_str()).collect();
            invalid(format!("unknown preset {s:?}; valid presets: {}", names.join(", ")))
        })
    }
}

/// Resolves a preset by name.
pub fn preset(name: &str) -> Result<ModelConfig> {
    Ok(name.parse::<PresetName>()?.config())
}
