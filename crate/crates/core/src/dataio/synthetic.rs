//! Synthetic cell-painting screens with known treatment latents.
//!
//! Each MoA group owns a random unit direction in latent space; a treatment's
//! latent is that direction plus a small treatment-specific perturbation,
//! renormalized. Controls sit at the zero latent. Every site shows the same
//! fixed arrangement of Gaussian "cells" whose per-channel brightness, size
//! and ring depth are affine functions of the latent, plus an additive
//! per-plate, per-channel offset and independent pixel noise.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{write_gray16, write_index, IndexRecord, Split, ANNOTATIONS_FILE, CHANNELS, INDEX_FILE, LATENTS_FILE};
use crate::error::{Error, Result};
use crate::eval::AnnotationMap;
use crate::profiles::Role;
use crate::tensor::Rng;
use crate::util::{fmt_sig9, write_atomic};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_moa_groups: usize,
    pub treatments_per_group: usize,
    /// Treated wells per treatment on each plate.
    pub wells_per_treatment: usize,
    pub sites_per_well: usize,
    pub control_wells_per_plate: usize,
    pub plates: usize,
    pub image_size: usize,
    pub channels: usize,
    pub noise_sigma: f64,
    /// Standard deviation of the additive per-plate, per-channel offset.
    pub plate_offset_sigma: f64,
    /// Dimension of the ground-truth latent profiles.
    pub latent_dim: usize,
    /// Size of the treatment-specific perturbation relative to the group direction.
    pub treatment_spread: f64,
    pub control_label: String,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_moa_groups: 4,
            treatments_per_group: 5,
            wells_per_treatment: 2,
            sites_per_well: 2,
            control_wells_per_plate: 4,
            plates: 2,
            image_size: 32,
            channels: 5,
            noise_sigma: 0.02,
            plate_offset_sigma: 0.4,
            latent_dim: 32,
            treatment_spread: 0.5,
            control_label: "DMSO".into(),
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_moa_groups", self.n_moa_groups),
            ("treatments_per_group", self.treatments_per_group),
            ("wells_per_treatment", self.wells_per_treatment),
            ("sites_per_well", self.sites_per_well),
            ("control_wells_per_plate", self.control_wells_per_plate),
            ("plates", self.plates),
            ("image_size", self.image_size),
            ("latent_dim", self.latent_dim),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("{name} must be >= 1")));
        }
        if self.channels != CHANNELS.len() {
            return Err(Error::InvalidArgument(format!(
                "channels must be {} (the canonical stain set)",
                CHANNELS.len()
            )));
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("plate_offset_sigma", self.plate_offset_sigma),
            ("treatment_spread", self.treatment_spread),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidArgument(format!("{name} must be finite and >= 0")));
            }
        }
        if self.control_label.is_empty() {
            return Err(Error::InvalidArgument("control_label must be non-empty".into()));
        }
        Ok(())
    }

    pub fn treatment_name(group: usize, index: usize) -> String {
        format!("moa{group}_cmpd{index}")
    }

    pub fn group_label(group: usize) -> String {
        format!("moa{group}")
    }

    /// Number of site images, controls included.
    pub fn total_images(&self) -> usize {
        let treated_wells = self.n_moa_groups * self.treatments_per_group * self.wells_per_treatment;
        self.plates * (treated_wells + self.control_wells_per_plate) * self.sites_per_well
    }
}

/// What [`gen_synthetic`] wrote.
#[derive(Debug, Clone)]
pub struct SyntheticSummary {
    pub index: PathBuf,
    pub annotations: PathBuf,
    pub latents: PathBuf,
    pub images: usize,
    pub treated_images: usize,
    /// Ground-truth latent per treatment (controls are zero).
    pub latent: BTreeMap<String, Vec<f64>>,
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Ground-truth latents: group directions perturbed per treatment.
fn latents(spec: &SyntheticSpec, rng: &mut Rng) -> BTreeMap<String, Vec<f64>> {
    let l = spec.latent_dim;
    let mut out = BTreeMap::new();
    for g in 0..spec.n_moa_groups {
        let dir = unit((0..l).map(|_| rng.normal()).collect());
        for t in 0..spec.treatments_per_group {
            let scale = spec.treatment_spread / (l as f64).sqrt();
            let z = dir.iter().map(|d| d + scale * rng.normal()).collect();
            out.insert(SyntheticSpec::treatment_name(g, t), unit(z));
        }
    }
    out.insert(spec.control_label.clone(), vec![0.0; l]);
    out
}

/// Per-channel cell appearance derived from a latent.
struct Appearance {
    amplitude: [f64; 5],
    sigma: [f64; 5],
    ring: [f64; 5],
}

/// Fixed random readout from latent space to the 15 appearance features.
struct Readout {
    weights: Vec<Vec<f64>>,
}

impl Readout {
    fn new(latent_dim: usize, rng: &mut Rng) -> Self {
        Self { weights: (0..15).map(|_| (0..latent_dim).map(|_| rng.normal()).collect()).collect() }
    }

    fn appearance(&self, z: &[f64]) -> Appearance {
        let f: Vec<f64> =
            self.weights.iter().map(|w| w.iter().zip(z).map(|(a, b)| a * b).sum::<f64>().tanh()).collect();
        let mut a = Appearance { amplitude: [0.0; 5], sigma: [0.0; 5], ring: [0.0; 5] };
        for c in 0..5 {
            a.amplitude[c] = 0.4 + 0.25 * f[c];
            a.sigma[c] = 1.6 * (0.35 * f[5 + c]).exp();
            a.ring[c] = 0.35 + 0.3 * f[10 + c];
        }
        a
    }
}

fn render(
    a: &Appearance,
    cells: &[(f64, f64)],
    size: usize,
    offset: &[f64],
    noise: f64,
    rng: &mut Rng,
) -> Vec<Vec<f32>> {
    (0..CHANNELS.len())
        .map(|c| {
            let (amp, s, ring) = (a.amplitude[c], a.sigma[c], a.ring[c]);
            let inner = 0.5 * s;
            (0..size * size)
                .map(|i| {
                    let (y, x) = ((i / size) as f64 + 0.5, (i % size) as f64 + 0.5);
                    let cell: f64 = cells
                        .iter()
                        .map(|&(cy, cx)| {
                            let d2 = (y - cy).powi(2) + (x - cx).powi(2);
                            (-d2 / (2.0 * s * s)).exp() - ring * (-d2 / (2.0 * inner * inner)).exp()
                        })
                        .sum();
                    let v = 0.1 + amp * cell + offset[c] + noise * rng.normal();
                    v.clamp(0.0, 1.0) as f32
                })
                .collect()
        })
        .collect()
}

fn well_name(i: usize) -> String {
    format!("{}{:02}", (b'A' + (i / 24) as u8) as char, i % 24 + 1)
}

/// Write a synthetic screen to `out_dir`: `index.csv`, 16-bit PNG channel
/// images under `images/`, `latents.csv` and `annotations.csv`.
pub fn gen_synthetic(spec: &SyntheticSpec, out_dir: impl AsRef<Path>) -> Result<SyntheticSummary> {
    spec.validate()?;
    let out = out_dir.as_ref();
    std::fs::create_dir_all(out.join("images"))?;
    let mut rng = Rng::new(spec.seed);
    let latent = latents(spec, &mut rng);
    let readout = Readout::new(spec.latent_dim, &mut rng);
    let s = spec.image_size as f64;
    let n_cells = ((s / 8.0).powi(2).round() as usize).max(1);
    let cells: Vec<(f64, f64)> =
        (0..n_cells).map(|_| (rng.uniform_range(0.15 * s, 0.85 * s), rng.uniform_range(0.15 * s, 0.85 * s))).collect();
    let offsets: Vec<Vec<f64>> = (0..spec.plates)
        .map(|_| (0..CHANNELS.len()).map(|_| spec.plate_offset_sigma * rng.normal()).collect())
        .collect();

    let mut wells: Vec<(usize, String, Role)> = Vec::new();
    for p in 0..spec.plates {
        let mut layout: Vec<(String, Role)> =
            (0..spec.control_wells_per_plate).map(|_| (spec.control_label.clone(), Role::Control)).collect();
        for g in 0..spec.n_moa_groups {
            for t in 0..spec.treatments_per_group {
                for _ in 0..spec.wells_per_treatment {
                    layout.push((SyntheticSpec::treatment_name(g, t), Role::Treated));
                }
            }
        }
        rng.shuffle(&mut layout);
        wells.extend(layout.into_iter().map(|(t, r)| (p, t, r)));
    }

    let mut records = Vec::new();
    let mut well_counter = vec![0usize; spec.plates];
    for (plate_idx, treatment, role) in wells {
        let plate = format!("P{:02}", plate_idx + 1);
        let well = well_name(well_counter[plate_idx]);
        well_counter[plate_idx] += 1;
        let look = readout.appearance(&latent[&treatment]);
        std::fs::create_dir_all(out.join("images").join(&plate))?;
        for site in 1..=spec.sites_per_well {
            let id = records.len() as u64;
            let mut noise_rng = Rng::derived(spec.seed, id + 1);
            let img = render(&look, &cells, spec.image_size, &offsets[plate_idx], spec.noise_sigma, &mut noise_rng);
            let mut channel_paths = BTreeMap::new();
            for (c, px) in CHANNELS.iter().zip(&img) {
                let rel = PathBuf::from("images").join(&plate).join(format!("{well}_s{site}_{c}.png"));
                write_gray16(&out.join(&rel), spec.image_size, spec.image_size, px)?;
                channel_paths.insert(c.to_string(), out.join(rel));
            }
            records.push(IndexRecord {
                plate: plate.clone(),
                well: well.clone(),
                site: site.to_string(),
                treatment: treatment.clone(),
                role,
                split: Split::Train,
                channel_paths,
            });
        }
    }
    let index = out.join(INDEX_FILE);
    write_index(&records, &index)?;

    let latents_path = out.join(LATENTS_FILE);
    let mut w = csv::Writer::from_writer(Vec::new());
    let header: Vec<String> =
        std::iter::once("treatment".to_string()).chain((0..spec.latent_dim).map(|i| format!("g{i:04}"))).collect();
    w.write_record(&header)?;
    for (t, z) in &latent {
        w.write_record(std::iter::once(t.clone()).chain(z.iter().map(|&v| fmt_sig9(v))))?;
    }
    write_atomic(&latents_path, &w.into_inner().map_err(|e| Error::Io(e.into_error()))?)?;

    let mut ann = AnnotationMap::new();
    for g in 0..spec.n_moa_groups {
        for t in 0..spec.treatments_per_group {
            ann.insert(SyntheticSpec::treatment_name(g, t), SyntheticSpec::group_label(g));
        }
    }
    let annotations = out.join(ANNOTATIONS_FILE);
    ann.write_csv(&annotations)?;
    write_atomic(&out.join("spec.json"), &serde_json::to_vec_pretty(spec)?)?;

    let treated_images = records.iter().filter(|r| r.role == Role::Treated).count();
    Ok(SyntheticSummary { index, annotations, latents: latents_path, images: records.len(), treated_images, latent })
}
