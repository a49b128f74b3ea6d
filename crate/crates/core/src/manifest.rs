//! JSON-lines dataset manifest: a header, one line per item, and a summary.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::qc::{dataset_stats, DatasetStats, Phase, QcRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub dataset_id: String,
    pub toolkit_version: String,
    /// Every hyperparameter and seed needed to regenerate the items.
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    #[serde(flatten)]
    pub record: QcRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_id: Option<u32>,
    /// Weight file path relative to the manifest directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crc32: Option<u32>,
}

/// Checksum recorded for a weight file: CRC32 over all of its bytes.
pub fn file_crc32(bytes: &[u8]) -> u32 {
    crc32fast::hash(bytes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ManifestSummary {
    pub total: usize,
    pub passed: usize,
    pub per_phase: BTreeMap<String, usize>,
    pub stats: DatasetStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Line {
    Header(ManifestHeader),
    Item(ManifestItem),
    Summary(ManifestSummary),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub header: Option<ManifestHeader>,
    pub items: Vec<ManifestItem>,
}

impl Manifest {
    pub fn new(header: ManifestHeader) -> Self {
        Self {
            header: Some(header),
            items: Vec::new(),
        }
    }

    /// Phase counts and PSNR statistics. Items without a class count as class 0.
    pub fn summary(&self) -> ManifestSummary {
        let mut per_phase: BTreeMap<String, usize> =
            Phase::ALL.iter().map(|p| (p.name().to_string(), 0)).collect();
        for it in &self.items {
            *per_phase.get_mut(it.record.phase.name()).unwrap() += 1;
        }
        let pairs: Vec<(u32, f64)> = self
            .items
            .iter()
            .map(|it| (it.class_id.unwrap_or(0), it.record.psnr))
            .collect();
        ManifestSummary {
            total: self.items.len(),
            passed: self.items.iter().filter(|it| it.record.passed).count(),
            per_phase,
            stats: dataset_stats(&pairs),
        }
    }

    /// Serialize with items sorted by id and a trailing summary line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut items = self.items.clone();
        items.sort_by(|a, b| a.record.id.cmp(&b.record.id));
        let mut out = String::new();
        if let Some(h) = &self.header {
            out += &serde_json::to_string(&Line::Header(h.clone()))?;
            out.push('\n');
        }
        for it in items {
            out += &serde_json::to_string(&Line::Item(it))?;
            out.push('\n');
        }
        out += &serde_json::to_string(&Line::Summary(self.summary()))?;
        out.push('\n');
        Ok(out)
    }

    /// Parse a manifest; summary lines are ignored and recomputed on demand.
    pub fn parse(text: &str) -> Result<Self> {
        let mut m = Manifest::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parsed: Line = serde_json::from_str(line)
                .map_err(|e| CoreError::invalid(format!("manifest line {}: {e}", i + 1)))?;
            match parsed {
                Line::Header(h) => m.header = Some(h),
                Line::Item(it) => m.items.push(it),
                Line::Summary(_) => {}
            }
        }
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()?).map_err(|e| CoreError::io(path, e))
    }

    /// Check that every referenced weight file exists and matches its CRC.
    pub fn verify(&self, base: &Path) -> Result<()> {
        for it in &self.items {
            let (Some(rel), Some(crc)) = (&it.weights, it.crc32) else {
                continue;
            };
            let path = base.join(rel);
            let bytes = std::fs::read(&path).map_err(|e| CoreError::io(&path, e))?;
            let computed = file_crc32(&bytes);
            if computed != crc {
                return Err(crate::inrz::FormatError::CrcMismatch {
                    stored: crc,
                    computed,
                }
                .into());
            }
        }
        Ok(())
    }
}
