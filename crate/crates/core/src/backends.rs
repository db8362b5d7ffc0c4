//! Construction of encoders and chat backends from their descriptors.

use std::path::Path;
use std::sync::Arc;

use crate::captioner::{
    ChatBackend, ChatBackendDescriptor, ChatBackendKind, ChatError, FixtureChatBackend, RemoteChatBackend,
};
use crate::encoders::{
    EncodeError, Encoder, EncoderDescriptor, EncoderKind, MockEncoder, Modality, PrecomputedEncoder, RemoteEncoder,
};
use crate::http::RetryPolicy;
use crate::synth::SynthWorld;

fn load_world(path: &str) -> std::io::Result<SynthWorld> {
    SynthWorld::load(Path::new(path))
}

/// Opens an encoder. A synthetic-mock text encoder whose path names a
/// synthetic world file uses that world's vocabulary encoder.
pub fn open_encoder(desc: &EncoderDescriptor, retry: RetryPolicy) -> Result<Arc<dyn Encoder>, EncodeError> {
    Ok(match desc.backend_kind {
        EncoderKind::Remote => Arc::new(RemoteEncoder::new(desc.clone(), retry)),
        EncoderKind::PrecomputedFile => Arc::new(PrecomputedEncoder::open(desc.clone())?),
        EncoderKind::SyntheticMock if desc.modality == Modality::Text && !desc.endpoint_or_path.is_empty() => {
            let enc = load_world(&desc.endpoint_or_path)?.text_encoder();
            if desc.dim != 0 && desc.dim != enc.descriptor().dim {
                return Err(EncodeError::DimensionMismatch {
                    expected: desc.dim,
                    got: enc.descriptor().dim,
                });
            }
            Arc::new(enc)
        }
        EncoderKind::SyntheticMock => Arc::new(MockEncoder::new(desc.clone())?),
    })
}

/// Opens a chat backend. A synthetic-mock backend with an endpoint naming a
/// synthetic world file answers from that world; without one it uses the
/// generic fixture backend.
pub fn open_chat(desc: &ChatBackendDescriptor, retry: RetryPolicy) -> Result<Arc<dyn ChatBackend>, ChatError> {
    Ok(match desc.backend_kind {
        ChatBackendKind::Remote => Arc::new(RemoteChatBackend::new(desc.clone(), retry)),
        ChatBackendKind::SyntheticMock if !desc.endpoint.is_empty() => {
            let world = load_world(&desc.endpoint)
                .map_err(|e| ChatError::BackendUnavailable(format!("{}: {e}", desc.endpoint)))?;
            Arc::new(world.mllm())
        }
        ChatBackendKind::SyntheticMock => Arc::new(FixtureChatBackend::new(desc.clone())),
    })
}
