//! Modal mask training and masked-context token sampling.

use std::fmt;

use rand::Rng;

use crate::data::SaevalRecord;
use crate::error::{Error, Result};
use crate::prompt::{Modality, PromptSequence, Vocab};

/// The text-inclusive modality subsets kept for training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModalitySetting {
    T,
    TA,
    TV,
    TAV,
}

impl ModalitySetting {
    pub const ALL: [ModalitySetting; 4] =
        [ModalitySetting::T, ModalitySetting::TA, ModalitySetting::TV, ModalitySetting::TAV];

    pub fn includes(self, m: Modality) -> bool {
        match m {
            Modality::Acoustic => matches!(self, ModalitySetting::TA | ModalitySetting::TAV),
            Modality::Visual => matches!(self, ModalitySetting::TV | ModalitySetting::TAV),
        }
    }

    /// Settings whose modalities are all present.
    pub fn available(has_audio: bool, has_visual: bool) -> Vec<ModalitySetting> {
        Self::ALL
            .into_iter()
            .filter(|s| (has_audio || !s.includes(Modality::Acoustic)) && (has_visual || !s.includes(Modality::Visual)))
            .collect()
    }
}

impl fmt::Display for ModalitySetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Which encoder inputs one example hides.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    pub setting: ModalitySetting,
    /// Ascending positions in the flattened token sequence.
    pub masked_token_positions: Vec<usize>,
    /// Ascending frame indices into the acoustic segment.
    pub masked_acoustic_frames: Vec<usize>,
    pub masked_visual_frames: Vec<usize>,
}

impl MaskPlan {
    pub fn empty(setting: ModalitySetting) -> Self {
        MaskPlan {
            setting,
            masked_token_positions: Vec::new(),
            masked_acoustic_frames: Vec::new(),
            masked_visual_frames: Vec::new(),
        }
    }

    pub fn frames(&self, m: Modality) -> &[usize] {
        match m {
            Modality::Acoustic => &self.masked_acoustic_frames,
            Modality::Visual => &self.masked_visual_frames,
        }
    }
}

/// Uniform draw over the settings the record can support.
pub fn sample_modal_setting<R: Rng + ?Sized>(record: &SaevalRecord, rng: &mut R) -> ModalitySetting {
    draw(&ModalitySetting::available(record.has_audio(), record.has_image()), rng)
}

/// As [`sample_modal_setting`], reading availability from a built prompt
/// (truncation may have removed a segment).
pub fn sample_prompt_setting<R: Rng + ?Sized>(prompt: &PromptSequence, rng: &mut R) -> ModalitySetting {
    let has = |m| prompt.segment(m).is_some();
    draw(&ModalitySetting::available(has(Modality::Acoustic), has(Modality::Visual)), rng)
}

fn draw<R: Rng + ?Sized>(options: &[ModalitySetting], rng: &mut R) -> ModalitySetting {
    if options.len() == 1 {
        return options[0];
    }
    options[rng.random_range(0..options.len())]
}

/// Drops the modal segments the setting excludes.
pub fn apply_modal_setting(prompt: &PromptSequence, setting: ModalitySetting) -> Result<PromptSequence> {
    for m in [Modality::Acoustic, Modality::Visual] {
        if setting.includes(m) && prompt.segment(m).is_none() {
            return Err(Error::Contract(format!("setting {setting} needs an absent {m:?} segment")));
        }
    }
    let mut out = prompt.clone();
    out.modal_segments.retain(|s| setting.includes(s.modality));
    Ok(out)
}

/// Independent Bernoulli(`p_mask`) masking of every context/query word and
/// every modal frame. The task identifier and answer span are never touched.
pub fn sample_mcm_plan<R: Rng + ?Sized>(
    prompt: &PromptSequence,
    vocab: &Vocab,
    setting: ModalitySetting,
    p_mask: f64,
    rng: &mut R,
) -> Result<MaskPlan> {
    if !(0.0..=1.0).contains(&p_mask) {
        return Err(Error::Contract(format!("mask probability {p_mask} outside [0, 1]")));
    }
    let mut pick = |n: usize| -> Vec<usize> { (0..n).filter(|_| rng.random_bool(p_mask)).collect() };
    let tokens = prompt.maskable_positions(vocab);
    let chosen = pick(tokens.len());
    let masked_token_positions = chosen.into_iter().map(|i| tokens[i]).collect();
    let frames = |m| prompt.segment(m).map_or(0, |s| s.frames.rows());
    let masked_acoustic_frames = pick(frames(Modality::Acoustic));
    let masked_visual_frames = pick(frames(Modality::Visual));
    Ok(MaskPlan { setting, masked_token_positions, masked_acoustic_frames, masked_visual_frames })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{FeatureMatrix, LabelValue, Registry, TaskType};
    use crate::prompt::build_prompt;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fixture() -> (Registry, Vocab, SaevalRecord) {
        let reg = Registry::from_json(
            r#"{"MOSI": {"task_type": "MSA", "acoustic_dim": 2, "visual_dim": 2, "metrics": ["mae"]}}"#,
        )
        .unwrap();
        let r = SaevalRecord {
            task_type: TaskType::MSA,
            dataset_id: "MOSI".into(),
            text: "it was a fine and calm day".into(),
            audio: Some(FeatureMatrix::new(3, 2, vec![0.5; 6]).unwrap()),
            image: Some(FeatureMatrix::new(2, 2, vec![0.5; 4]).unwrap()),
            context: vec![],
            speaker_id: None,
            utterance_index: None,
            label: LabelValue::Scalar(0.4),
            joined_texts: vec![],
        };
        let v = Vocab::build(&reg, std::slice::from_ref(&r), 8).unwrap();
        (reg, v, r)
    }

    #[test]
    fn availability_filter() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (_, _, mut r) = fixture();
        r.image = None;
        for _ in 0..200 {
            assert!(matches!(sample_modal_setting(&r, &mut rng), ModalitySetting::T | ModalitySetting::TA));
        }
        r.audio = None;
        assert_eq!(sample_modal_setting(&r, &mut rng), ModalitySetting::T);
    }

    #[test]
    fn apply_setting() {
        let (reg, v, r) = fixture();
        let p = build_prompt(&r, &v, &reg, 64).unwrap();
        assert_eq!(apply_modal_setting(&p, ModalitySetting::TAV).unwrap(), p);
        let t = apply_modal_setting(&p, ModalitySetting::T).unwrap();
        assert!(t.modal_segments.is_empty());
        assert_eq!(apply_modal_setting(&t, ModalitySetting::T).unwrap(), t);
        let tv = apply_modal_setting(&p, ModalitySetting::TV).unwrap();
        assert_eq!(tv.modal_segments.len(), 1);
        assert_eq!(tv.modal_segments[0].modality, Modality::Visual);
        assert!(matches!(apply_modal_setting(&t, ModalitySetting::TA), Err(Error::Contract(_))));
    }

    #[test]
    fn plan_extremes() {
        let (reg, v, r) = fixture();
        let p = build_prompt(&r, &v, &reg, 64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let none = sample_mcm_plan(&p, &v, ModalitySetting::TAV, 0.0, &mut rng).unwrap();
        assert_eq!(none, MaskPlan::empty(ModalitySetting::TAV));
        let all = sample_mcm_plan(&p, &v, ModalitySetting::TAV, 1.0, &mut rng).unwrap();
        assert_eq!(all.masked_token_positions, p.maskable_positions(&v));
        assert_eq!(all.masked_token_positions.len(), v.tokenize(&r.text).len());
        assert_eq!(all.masked_acoustic_frames, vec![0, 1, 2]);
        assert_eq!(all.masked_visual_frames, vec![0, 1]);
        assert!(sample_mcm_plan(&p, &v, ModalitySetting::T, 1.5, &mut rng).is_err());
    }
}
