//! Synthetic corpus generation, the JSONL manifest format, and tokenization.

pub mod manifest;
pub mod synth;
pub mod vocab;

pub use manifest::{
    group_by_image, load_manifest, load_samples, resolve_manifest_path, ImageGroup, Manifest,
    ManifestRecord, Sample, Split, MANIFEST_FILE,
};
pub use synth::{synthesize, ShapeKind, SynthConfig};
pub use vocab::{tokenize, Vocabulary, BOS, EOS, PAD, UNK};

/// Words of the fixed segmentation prompt; added to every vocabulary the
/// training pipeline builds so the prompt never tokenizes to UNK.
pub const PROMPT_TEMPLATE: &str = "generate the mask for the emotion";

/// Vocabulary over all manifests' explanations plus the prompt template.
pub fn build_vocabulary(manifests: &[&Manifest]) -> Vocabulary {
    Vocabulary::build(
        manifests
            .iter()
            .flat_map(|m| m.explanations())
            .chain(std::iter::once(PROMPT_TEMPLATE)),
    )
}
