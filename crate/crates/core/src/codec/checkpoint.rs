use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{CodecConfig, CodecError, CodecModel, Result};
use crate::checkpoint::{self, CheckpointError};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"GWM1";
pub const CHECKPOINT_VERSION: u16 = 1;
const CONFIG_WORDS: usize = 7;

impl CodecModel {
    /// Encoder parameters then decoder parameters, in declaration order.
    pub fn to_bytes(&self) -> Vec<u8> {
        checkpoint::encode(
            CHECKPOINT_MAGIC,
            CHECKPOINT_VERSION,
            &self.config.to_words(),
            &[&self.encoder.params, &self.decoder.params],
        )
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let decoded = checkpoint::decode(bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, CONFIG_WORDS)?;
        let config = CodecConfig::from_words(&decoded.config);
        config
            .validate()
            .map_err(|e| CheckpointError::InvalidConfig(e.to_string()))?;
        let mut model = CodecModel::with_std(config, 0.0, &mut ChaCha8Rng::seed_from_u64(0))?;
        checkpoint::fill(&mut [&mut model.encoder.params, &mut model.decoder.params], &decoded.values)?;
        Ok(model)
    }
}

pub fn save_checkpoint(model: &CodecModel, path: &Path) -> Result<()> {
    Ok(checkpoint::write_file(path, &model.to_bytes())?)
}

pub fn load_checkpoint(path: &Path) -> Result<CodecModel> {
    CodecModel::from_bytes(&checkpoint::read_file(path).map_err(CodecError::from)?)
}
