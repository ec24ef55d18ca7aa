//! Token-id layout: 0..=255 are raw bytes, then the special tokens, then
//! optional learned-merge ids. Kept in its own module so the model can
//! validate batches without depending on tokenizer plumbing.

pub const BYTE_VOCAB: u32 = 256;

/// Task-signaling tokens.
pub const AE: u32 = 256;
pub const LM: u32 = 257;
pub const QA: u32 = 258;
pub const ACT: u32 = 259;

/// Marks the end of an autoencoding reconstruction.
pub const END_RECON: u32 = 260;
/// Placeholder id occupying memory-token slots in a token sequence.
pub const MEM_SENTINEL: u32 = 261;
/// Terminates generated actions and answers.
pub const EOS: u32 = 262;

pub const NUM_SPECIALS: u32 = 7;
pub const FIRST_MERGE_ID: u32 = BYTE_VOCAB + NUM_SPECIALS;

pub fn is_special(id: u32) -> bool {
    (BYTE_VOCAB..FIRST_MERGE_ID).contains(&id)
}

/// Printable stand-in for a special token in decoded text.
pub fn special_glyph(id: u32) -> Option<&'static str> {
    match id {
        AE => Some("⟨AE⟩"),
        LM => Some("⟨LM⟩"),
        QA => Some("⟨QA⟩"),
        ACT => Some("⟨ACT⟩"),
        END_RECON => Some("⟨END⟩"),
        MEM_SENTINEL => Some("⟨MEM⟩"),
        EOS => Some("⟨EOS⟩"),
        _ => None,
    }
}
