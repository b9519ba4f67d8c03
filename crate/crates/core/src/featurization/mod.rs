//! Turning raw images, waveforms and token ids into token sequences.

mod audio;
mod embed;
mod image;
pub mod io;

pub use audio::{
    assemble_temporal_patches, hz_to_mel, log_mel_fbank, mel_to_hz, split_spectrogram_patches, AcousticPatchMode,
    Fbank, FbankConfig, Spectrogram, SQUARE_PATCH,
};
pub use embed::{Modality, PatchEmbed, TextEmbed, TokenSequence, INIT_STD};
pub use image::{assemble_image_patches, split_image_patches, ImageGeometry, VisualInput};
