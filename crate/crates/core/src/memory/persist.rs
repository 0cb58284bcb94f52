//! On-disk layout: `manifest.json` (dimension, metric, ids, payloads) plus
//! `vectors.f32`, the entries' vectors concatenated in id order as
//! little-endian IEEE-754 single precision.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FactEmbedding, MemoryError, MemoryPayload, Metric, VectorMemory};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const VECTORS_FILE: &str = "vectors.f32";
const FORMAT: &str = "cotedit-memory/1";

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    dimension: usize,
    metric: Metric,
    count: usize,
    ids: Vec<String>,
    payloads: Vec<MemoryPayload>,
}

impl VectorMemory {
    pub fn save(&self, dir: &Path) -> Result<(), MemoryError> {
        std::fs::create_dir_all(dir)?;
        let manifest = Manifest {
            format: FORMAT.into(),
            dimension: self.dimension,
            metric: self.metric,
            count: self.entries.len(),
            ids: self.entries.iter().map(|e| e.fact_id.clone()).collect(),
            payloads: self.entries.iter().map(|e| e.payload.clone()).collect(),
        };
        let mut bytes = Vec::with_capacity(self.entries.len() * self.dimension * 4);
        for e in &self.entries {
            for x in &e.vector {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        crate::write_atomic(&dir.join(VECTORS_FILE), &bytes)?;
        let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        crate::write_atomic(&dir.join(MANIFEST_FILE), &json)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, MemoryError> {
        let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| MemoryError::Manifest(e.to_string()))?;
        if m.format != FORMAT {
            return Err(MemoryError::Manifest(format!("unknown format {:?}", m.format)));
        }
        if m.ids.len() != m.count || m.payloads.len() != m.count {
            return Err(MemoryError::Manifest("count disagrees with ids/payloads".into()));
        }
        let bytes = std::fs::read(dir.join(VECTORS_FILE))?;
        if bytes.len() != m.count * m.dimension * 4 {
            return Err(MemoryError::Manifest(format!(
                "vector file has {} bytes, expected {}",
                bytes.len(),
                m.count * m.dimension * 4
            )));
        }
        let floats: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let mut mem = VectorMemory::new(m.dimension, m.metric);
        for ((id, payload), i) in m.ids.into_iter().zip(m.payloads).zip(0..) {
            let start = i * m.dimension;
            mem.push(FactEmbedding {
                fact_id: id,
                vector: floats[start..start + m.dimension].to_vec(),
                payload,
            })?;
        }
        Ok(mem)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{ContextSource, EditContext, EditFact};
    use crate::memory::HashBagEmbedder;

    #[test]
    fn round_trip_with_both_payload_kinds() {
        let e = HashBagEmbedder::new(16);
        let mut m = VectorMemory::new(16, Metric::Cosine);
        m.insert(MemoryPayload::Fact(EditFact::new("a", "b", "c").unwrap()), &e).unwrap();
        m.insert(
            MemoryPayload::Context(EditContext::new("some passage", ContextSource::Wikiupdate).unwrap()),
            &e,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        let back = VectorMemory::load(dir.path()).unwrap();
        assert_eq!(back, m);
        let raw = std::fs::read(dir.path().join(VECTORS_FILE)).unwrap();
        assert_eq!(raw.len(), 2 * 16 * 4);
    }

    #[test]
    fn truncated_vector_file_rejected() {
        let e = HashBagEmbedder::new(4);
        let mut m = VectorMemory::new(4, Metric::Dot);
        m.insert(MemoryPayload::Fact(EditFact::new("a", "b", "c").unwrap()), &e).unwrap();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        std::fs::write(dir.path().join(VECTORS_FILE), [0u8; 3]).unwrap();
        assert!(matches!(VectorMemory::load(dir.path()), Err(MemoryError::Manifest(_))));
    }
}
