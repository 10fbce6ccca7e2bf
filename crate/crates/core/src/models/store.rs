use std::sync::Arc;

use parking_lot::RwLock;

use super::DecoderParams;
use crate::error::{Error, Result};

/// Versioned parameter cell with snapshot reads and atomic commits.
///
/// Readers clone an `Arc` to a complete parameter set; a commit swaps the
/// pointer, so a reader never observes a partially written update.
#[derive(Debug)]
pub struct ParamStore {
    current: RwLock<Arc<DecoderParams>>,
}

impl ParamStore {
    pub fn new(params: DecoderParams) -> Self {
        Self {
            current: RwLock::new(Arc::new(params)),
        }
    }

    pub fn snapshot(&self) -> Arc<DecoderParams> {
        Arc::clone(&self.current.read())
    }

    pub fn version(&self) -> u64 {
        self.current.read().version
    }

    /// Publishes `params`; rejects versions that do not move forward.
    pub fn commit(&self, params: DecoderParams) -> Result<u64> {
        let mut cur = self.current.write();
        if params.version <= cur.version {
            return Err(Error::config(
                "decoder.version",
                format!("commit of version {} does not advance {}", params.version, cur.version),
            ));
        }
        let v = params.version;
        *cur = Arc::new(params);
        Ok(v)
    }
}
