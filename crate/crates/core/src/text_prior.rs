//! Text-prompt prior knowledge.
//!
//! A prompt bank pairs normal and abnormal prompt templates for one class
//! label. Encoding and averaging each side yields two text prototypes; the
//! softmax over their similarities to an image embedding is the text-prior
//! abnormality probability `s_a`.

use ndarray::Array1;
use serde::{Deserialize, Serialize};
use std::str::FromStr;

use crate::encoder::EncoderBackend;
use crate::error::{Error, Result};

/// Bundled defect-style ensemble (state and template level prompts).
const DEFECT_TEMPLATES: &str = include_str!("../assets/defect_templates.txt");

const CLASS_SLOT: &str = "[c]";

/// Prompt corpus style.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStyle {
    /// Industrial-inspection ensemble (states like "flawless" crossed with
    /// photo templates).
    Defect,
    /// Two-prompt pair for natural-image semantic anomaly detection.
    Semantic,
}

impl FromStr for PromptStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "defect" => Ok(Self::Defect),
            "semantic" => Ok(Self::Semantic),
            other => Err(Error::InvalidInput(format!(
                "unknown prompt style {other:?} (expected \"defect\" or \"semantic\")"
            ))),
        }
    }
}

/// Normal/abnormal prompt templates for one class label. Templates keep the
/// literal `[c]` slot; rendering substitutes the label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBank {
    pub normal_templates: Vec<String>,
    pub abnormal_templates: Vec<String>,
    pub class_label: String,
}

impl PromptBank {
    pub fn new(
        normal_templates: Vec<String>,
        abnormal_templates: Vec<String>,
        class_label: String,
    ) -> Result<Self> {
        if class_label.is_empty() {
            return Err(Error::InvalidInput("empty class label".into()));
        }
        if normal_templates.is_empty() || abnormal_templates.is_empty() {
            return Err(Error::InvalidInput("prompt bank sides must both be nonempty".into()));
        }
        for t in normal_templates.iter().chain(&abnormal_templates) {
            if t.matches(CLASS_SLOT).count() != 1 {
                return Err(Error::InvalidInput(format!(
                    "template {t:?} must contain exactly one {CLASS_SLOT} slot"
                )));
            }
        }
        Ok(Self {
            normal_templates,
            abnormal_templates,
            class_label,
        })
    }

    pub fn rendered_normal(&self) -> Vec<String> {
        self.normal_templates
            .iter()
            .map(|t| t.replace(CLASS_SLOT, &self.class_label))
            .collect()
    }

    pub fn rendered_abnormal(&self) -> Vec<String> {
        self.abnormal_templates
            .iter()
            .map(|t| t.replace(CLASS_SLOT, &self.class_label))
            .collect()
    }
}

/// Parse a template file: one template per line, `[normal]` / `[abnormal]`
/// section markers, `#` comments.
pub fn parse_template_file(text: &str, class_label: &str) -> Result<PromptBank> {
    let mut normal = Vec::new();
    let mut abnormal = Vec::new();
    let mut current: Option<&mut Vec<String>> = None;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        match line {
            "[normal]" => current = Some(&mut normal),
            "[abnormal]" => current = Some(&mut abnormal),
            template => match current {
                Some(ref mut side) => side.push(template.to_string()),
                None => {
                    return Err(Error::InvalidInput(format!(
                        "template {template:?} appears before any [normal]/[abnormal] section"
                    )))
                }
            },
        }
    }
    PromptBank::new(normal, abnormal, class_label.to_string())
}

/// Build the prompt bank for a class label in the given style.
pub fn build_prompt_bank(class_label: &str, style: PromptStyle) -> Result<PromptBank> {
    if class_label.is_empty() {
        return Err(Error::InvalidInput("empty class label".into()));
    }
    match style {
        PromptStyle::Defect => parse_template_file(DEFECT_TEMPLATES, class_label),
        PromptStyle::Semantic => PromptBank::new(
            vec!["a photo of [c] for anomaly detection.".to_string()],
            vec!["a photo without [c] for anomaly detection.".to_string()],
            class_label.to_string(),
        ),
    }
}

/// Mean text embeddings of the two prompt sides.
#[derive(Debug, Clone, PartialEq)]
pub struct TextPrototypes {
    pub normal: Array1<f64>,
    pub abnormal: Array1<f64>,
}

/// Encode every rendered prompt and average each side. With `normalize`,
/// individual embeddings are L2-normalized before averaging.
pub fn text_prototypes(
    bank: &PromptBank,
    backend: &dyn EncoderBackend,
    normalize: bool,
) -> Result<TextPrototypes> {
    let side = |prompts: Vec<String>| -> Result<Array1<f64>> {
        let mut acc = Array1::<f64>::zeros(backend.geometry().global_dim);
        let count = prompts.len();
        for prompt in prompts {
            let v = if normalize {
                backend.encode_text_normalized(&prompt)?
            } else {
                backend.encode_text(&prompt)?
            };
            acc += &v;
        }
        Ok(acc / count as f64)
    };
    Ok(TextPrototypes {
        normal: side(bank.rendered_normal())?,
        abnormal: side(bank.rendered_abnormal())?,
    })
}

/// Scoring-time options for the text prior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TextPriorConfig {
    /// Softmax temperature; logits are divided by it. 1.0 leaves them as-is.
    pub temperature: f64,
    /// L2-normalize the image embedding before the dot products.
    pub normalize: bool,
}

impl Default for TextPriorConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            normalize: true,
        }
    }
}

/// Text-prior abnormality probability: softmax over the similarities of the
/// image embedding to the abnormal and normal prototypes. Computed with
/// max-subtraction so extreme logits cannot overflow.
pub fn text_prior_score(
    image_global: &Array1<f64>,
    protos: &TextPrototypes,
    cfg: &TextPriorConfig,
) -> Result<f64> {
    if image_global.len() != protos.normal.len() || image_global.len() != protos.abnormal.len() {
        return Err(Error::Contract(format!(
            "image embedding dimension {} does not match prototypes ({}, {})",
            image_global.len(),
            protos.normal.len(),
            protos.abnormal.len()
        )));
    }
    if cfg.temperature <= 0.0 || !cfg.temperature.is_finite() {
        return Err(Error::Config(format!(
            "temperature must be positive and finite, got {}",
            cfg.temperature
        )));
    }
    let v = if cfg.normalize {
        let norm = image_global.dot(image_global).sqrt();
        if norm == 0.0 {
            return Err(Error::Numeric("cannot normalize a zero image embedding".into()));
        }
        image_global / norm
    } else {
        image_global.clone()
    };
    let logit_n = protos.normal.dot(&v) / cfg.temperature;
    let logit_a = protos.abnormal.dot(&v) / cfg.temperature;
    if !logit_n.is_finite() || !logit_a.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite text-prior logits ({logit_n}, {logit_a})"
        )));
    }
    let m = logit_n.max(logit_a);
    let e_n = (logit_n - m).exp();
    let e_a = (logit_a - m).exp();
    let s_a = e_a / (e_n + e_a);
    // The softmax lands exactly on 0 or 1 only for astronomically separated
    // logits; nudge inside the open interval required downstream.
    Ok(s_a.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{MockBackend, MockConfig};
    use ndarray::arr1;

    fn backend() -> MockBackend {
        MockBackend::new(MockConfig::default()).unwrap()
    }

    #[test]
    fn defect_bank_contains_table_examples() {
        let bank = build_prompt_bank("bottle", PromptStyle::Defect).unwrap();
        let rendered = bank.rendered_normal();
        assert!(rendered.contains(&"a photo of a flawless bottle for visual inspection.".to_string()));
        assert!(rendered.contains(&"a cropped photo of a perfect bottle.".to_string()));
        assert!(rendered.contains(&"a blurry photo of the bottle without defect.".to_string()));
        assert!(rendered.contains(&"a dark photo of the unblemished bottle.".to_string()));
        assert!(rendered.contains(&"a jpeg corrupted photo of a bottle without flaw.".to_string()));
        let abnormal = bank.rendered_abnormal();
        assert!(abnormal.contains(&"a photo of a bottle with flaw for visual inspection.".to_string()));
        assert!(abnormal.contains(&"a cropped photo of a bottle with damage.".to_string()));
        assert!(abnormal.contains(&"a blurry photo of the bottle with defect.".to_string()));
        assert!(abnormal.contains(&"a dark photo of the bottle with flaw.".to_string()));
        assert!(abnormal.contains(&"a jpeg corrupted photo of a bottle with defect.".to_string()));
    }

    #[test]
    fn semantic_bank_is_the_two_prompt_pair() {
        let bank = build_prompt_bank("airplane", PromptStyle::Semantic).unwrap();
        assert_eq!(
            bank.rendered_normal(),
            vec!["a photo of airplane for anomaly detection.".to_string()]
        );
        assert_eq!(
            bank.rendered_abnormal(),
            vec!["a photo without airplane for anomaly detection.".to_string()]
        );
    }

    #[test]
    fn substitution_is_complete() {
        let bank = build_prompt_bank("x", PromptStyle::Defect).unwrap();
        for s in bank.rendered_normal().iter().chain(bank.rendered_abnormal().iter()) {
            assert!(s.contains('x'), "{s:?} lost the class label");
            assert!(!s.contains("[c]"), "{s:?} kept the literal slot");
        }
    }

    #[test]
    fn style_parsing() {
        assert_eq!(PromptStyle::from_str("defect").unwrap(), PromptStyle::Defect);
        assert_eq!(PromptStyle::from_str("semantic").unwrap(), PromptStyle::Semantic);
        assert!(PromptStyle::from_str("other").is_err());
        assert!(build_prompt_bank("", PromptStyle::Defect).is_err());
    }

    #[test]
    fn single_template_prototype_is_that_embedding() {
        let bank = PromptBank::new(
            vec!["a photo of a [c].".into()],
            vec!["a photo of a broken [c].".into()],
            "widget".into(),
        )
        .unwrap();
        let b = backend();
        let protos = text_prototypes(&bank, &b, false).unwrap();
        assert_eq!(protos.normal, b.encode_text("a photo of a widget.").unwrap());
        assert_eq!(
            protos.abnormal,
            b.encode_text("a photo of a broken widget.").unwrap()
        );
    }

    #[test]
    fn duplicating_the_template_list_keeps_the_mean() {
        let single = PromptBank::new(
            vec!["a [c] one.".into(), "a [c] two.".into()],
            vec!["bad [c].".into()],
            "part".into(),
        )
        .unwrap();
        let doubled = PromptBank::new(
            vec!["a [c] one.".into(), "a [c] two.".into(), "a [c] one.".into(), "a [c] two.".into()],
            vec!["bad [c].".into()],
            "part".into(),
        )
        .unwrap();
        let b = backend();
        let p1 = text_prototypes(&single, &b, false).unwrap();
        let p2 = text_prototypes(&doubled, &b, false).unwrap();
        for (a, c) in p1.normal.iter().zip(p2.normal.iter()) {
            assert!((a - c).abs() < 1e-12);
        }
    }

    #[test]
    fn prototypes_match_mean_oracle() {
        let bank = build_prompt_bank("gear", PromptStyle::Defect).unwrap();
        let b = backend();
        let protos = text_prototypes(&bank, &b, false).unwrap();
        let rendered = bank.rendered_normal();
        let dim = b.geometry().global_dim;
        for idx in 0..dim {
            let mean: f64 = rendered
                .iter()
                .map(|p| b.encode_text(p).unwrap()[idx])
                .sum::<f64>()
                / rendered.len() as f64;
            assert!((protos.normal[idx] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn symmetric_logits_score_half() {
        let protos = TextPrototypes {
            normal: arr1(&[1.0, 0.0]),
            abnormal: arr1(&[1.0, 0.0]),
        };
        let cfg = TextPriorConfig {
            temperature: 1.0,
            normalize: false,
        };
        let s = text_prior_score(&arr1(&[0.3, 0.9]), &protos, &cfg).unwrap();
        assert!((s - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ln3_separation_scores_three_quarters() {
        // v = [1], F_a = [ln 3], F_n = [0].
        let protos = TextPrototypes {
            normal: arr1(&[0.0]),
            abnormal: arr1(&[3.0_f64.ln()]),
        };
        let cfg = TextPriorConfig {
            temperature: 1.0,
            normalize: false,
        };
        let s = text_prior_score(&arr1(&[1.0]), &protos, &cfg).unwrap();
        assert!((s - 0.75).abs() < 1e-12);
    }

    #[test]
    fn extreme_separation_is_overflow_safe() {
        let protos = TextPrototypes {
            normal: arr1(&[0.0]),
            abnormal: arr1(&[1000.0]),
        };
        let cfg = TextPriorConfig {
            temperature: 1.0,
            normalize: false,
        };
        let s = text_prior_score(&arr1(&[1.0]), &protos, &cfg).unwrap();
        assert!(s > 0.999_999 && s < 1.0 && s.is_finite());
    }

    #[test]
    fn prototype_swap_complements() {
        let b = backend();
        let bank = build_prompt_bank("bolt", PromptStyle::Defect).unwrap();
        let protos = text_prototypes(&bank, &b, true).unwrap();
        let swapped = TextPrototypes {
            normal: protos.abnormal.clone(),
            abnormal: protos.normal.clone(),
        };
        let v = b.encode_text("query stand-in").unwrap();
        let cfg = TextPriorConfig::default();
        let s = text_prior_score(&v, &protos, &cfg).unwrap();
        let s_swap = text_prior_score(&v, &swapped, &cfg).unwrap();
        assert!((s + s_swap - 1.0).abs() < 1e-12);
    }
}
