//! Retrieval evaluation: CMC, mAP, mAP ratio and ranking lists.
//!
//! For every probe the gallery is sorted by ascending distance, ties broken
//! by gallery index. Under the cross-camera protocol, gallery images sharing
//! both identity and camera with the probe are removed before scoring.
//! Probes with no relevant gallery image left are skipped.

use std::collections::BTreeMap;
use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::data::ImageShape;
use crate::error::{Error, Result};
use crate::metrics::DistanceMatrix;

/// Rank cut-offs reported by default.
pub const DEFAULT_RANKS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Skip gallery images with the probe's identity and camera.
    #[default]
    CrossCamera,
    All,
}

/// Identity and camera labels of one side of a distance matrix.
#[derive(Debug, Clone, Copy)]
pub struct Labels<'a> {
    pub identities: &'a [u32],
    pub cameras: &'a [u32],
}

impl<'a> Labels<'a> {
    pub fn new(identities: &'a [u32], cameras: &'a [u32]) -> Self {
        Self {
            identities,
            cameras,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    #[serde(rename = "mAP")]
    pub map: f64,
    /// Rank-k accuracy keyed by k.
    pub rank: BTreeMap<usize, f64>,
    pub num_probes_evaluated: usize,
}

impl EvalReport {
    pub fn rank1(&self) -> Option<f64> {
        self.rank.get(&1).copied()
    }
}

fn check_dims(dist: &DistanceMatrix, probes: &Labels, gallery: &Labels) -> Result<()> {
    let ok = probes.identities.len() == dist.rows
        && probes.cameras.len() == dist.rows
        && gallery.identities.len() == dist.cols
        && gallery.cameras.len() == dist.cols;
    if ok {
        Ok(())
    } else {
        Err(Error::Invalid(format!(
            "labels ({} probes, {} gallery) do not match a {}x{} distance matrix",
            probes.identities.len(),
            gallery.identities.len(),
            dist.rows,
            dist.cols
        )))
    }
}

/// Relevance flags of the kept gallery items in ranked order, or `None` if
/// the probe has no relevant item after exclusions.
fn ranked_relevance(
    dist: &DistanceMatrix,
    probe: usize,
    probes: &Labels,
    gallery: &Labels,
    protocol: Protocol,
) -> Option<Vec<bool>> {
    let pid = probes.identities[probe];
    let pcam = probes.cameras[probe];
    let mut order: Vec<usize> = (0..dist.cols)
        .filter(|&j| {
            protocol == Protocol::All
                || !(gallery.identities[j] == pid && gallery.cameras[j] == pcam)
        })
        .collect();
    let row = dist.row(probe);
    order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
    let flags: Vec<bool> = order
        .iter()
        .map(|&j| gallery.identities[j] == pid)
        .collect();
    flags.iter().any(|&f| f).then_some(flags)
}

fn average_precision(flags: &[bool]) -> f64 {
    let mut hits = 0usize;
    let mut total = 0.0;
    for (pos, &rel) in flags.iter().enumerate() {
        if rel {
            hits += 1;
            total += hits as f64 / (pos + 1) as f64;
        }
    }
    total / hits as f64
}

/// Mean over evaluable probes of average precision.
pub fn mean_average_precision(
    dist: &DistanceMatrix,
    probes: &Labels,
    gallery: &Labels,
    protocol: Protocol,
) -> Result<f64> {
    Ok(evaluate(dist, probes, gallery, &[], protocol)?.map)
}

/// Rank-k accuracy for each requested k.
pub fn cmc(
    dist: &DistanceMatrix,
    probes: &Labels,
    gallery: &Labels,
    ks: &[usize],
    protocol: Protocol,
) -> Result<BTreeMap<usize, f64>> {
    Ok(evaluate(dist, probes, gallery, ks, protocol)?.rank)
}

/// mAP and CMC in one pass.
pub fn evaluate(
    dist: &DistanceMatrix,
    probes: &Labels,
    gallery: &Labels,
    ks: &[usize],
    protocol: Protocol,
) -> Result<EvalReport> {
    check_dims(dist, probes, gallery)?;
    let mut ap_sum = 0.0;
    let mut evaluated = 0usize;
    let mut hits_at: BTreeMap<usize, usize> = ks.iter().map(|&k| (k, 0)).collect();
    for p in 0..dist.rows {
        let Some(flags) = ranked_relevance(dist, p, probes, gallery, protocol) else {
            continue;
        };
        evaluated += 1;
        ap_sum += average_precision(&flags);
        let first = flags.iter().position(|&f| f).expect("has a relevant item");
        for (&k, count) in hits_at.iter_mut() {
            if first < k {
                *count += 1;
            }
        }
    }
    if evaluated == 0 {
        return Err(Error::NoEvaluableProbes);
    }
    Ok(EvalReport {
        protocol,
        map: ap_sum / evaluated as f64,
        rank: hits_at
            .into_iter()
            .map(|(k, c)| (k, c as f64 / evaluated as f64))
            .collect(),
        num_probes_evaluated: evaluated,
    })
}

/// `adv.mAP / clean.mAP`.
pub fn map_ratio(adv: &EvalReport, clean: &EvalReport) -> Result<f64> {
    if clean.map <= 0.0 {
        return Err(Error::Invalid("clean mAP is zero; ratio undefined".into()));
    }
    Ok(adv.map / clean.map)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub gallery_index: usize,
    pub distance: f64,
    pub relevant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingList {
    pub probe_index: usize,
    pub probe_identity: u32,
    pub entries: Vec<RankEntry>,
}

/// Top `top_k` gallery items for one probe, nearest first.
pub fn ranking_list(
    probe_index: usize,
    probe_identity: u32,
    dist: &DistanceMatrix,
    gallery_identities: &[u32],
    top_k: usize,
) -> Result<RankingList> {
    if probe_index >= dist.rows {
        return Err(Error::Invalid(format!(
            "probe index {probe_index} out of range for {} probes",
            dist.rows
        )));
    }
    if gallery_identities.len() != dist.cols {
        return Err(Error::DimensionMismatch {
            left: gallery_identities.len(),
            right: dist.cols,
        });
    }
    if top_k > dist.cols {
        return Err(Error::Invalid(format!(
            "top_k {top_k} exceeds gallery size {}",
            dist.cols
        )));
    }
    let row = dist.row(probe_index);
    let mut order: Vec<usize> = (0..dist.cols).collect();
    order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
    let entries = order
        .into_iter()
        .take(top_k)
        .map(|j| RankEntry {
            gallery_index: j,
            distance: row[j],
            relevant: gallery_identities[j] == probe_identity,
        })
        .collect();
    Ok(RankingList {
        probe_index,
        probe_identity,
        entries,
    })
}

/// 1-based position `gallery_index` would take in the probe's ranking
/// (ties resolved by index).
pub fn rank_of(dist: &DistanceMatrix, probe_index: usize, gallery_index: usize) -> usize {
    let row = dist.row(probe_index);
    let d = row[gallery_index];
    1 + row
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v < d || (v == d && j < gallery_index))
        .count()
}

const BORDER: u32 = 2;
const GAP: u32 = 4;

/// Side-by-side strip: the probe, then each ranked gallery image framed green
/// when relevant and red otherwise. Pixel buffers are row-major `H × W × C`.
pub fn render_ranking_strip(
    shape: ImageShape,
    probe: &[f32],
    list: &RankingList,
    gallery_pixels: impl Fn(usize) -> Vec<f32>,
) -> RgbImage {
    let (h, w) = (shape.height as u32, shape.width as u32);
    let cell_w = w + 2 * BORDER;
    let n = list.entries.len() as u32 + 1;
    let width = n * cell_w + (n - 1) * GAP + GAP;
    let mut img = RgbImage::from_pixel(width, h + 2 * BORDER, Rgb([255, 255, 255]));
    let mut draw = |slot: u32, pixels: &[f32], frame: Rgb<u8>| {
        let x0 = slot * (cell_w + GAP) + if slot > 0 { GAP } else { 0 };
        for y in 0..h + 2 * BORDER {
            for x in 0..cell_w {
                img.put_pixel(x0 + x, y, frame);
            }
        }
        for y in 0..h {
            for x in 0..w {
                let base = ((y * w + x) as usize) * shape.channels;
                let px = |c: usize| {
                    pixels[base + c.min(shape.channels - 1)]
                        .round()
                        .clamp(0.0, 255.0) as u8
                };
                img.put_pixel(x0 + BORDER + x, y + BORDER, Rgb([px(0), px(1), px(2)]));
            }
        }
    };
    draw(0, probe, Rgb([40, 40, 40]));
    for (i, entry) in list.entries.iter().enumerate() {
        let frame = if entry.relevant {
            Rgb([0, 170, 0])
        } else {
            Rgb([200, 0, 0])
        };
        draw(i as u32 + 1, &gallery_pixels(entry.gallery_index), frame);
    }
    img
}

pub fn save_ranking_strip(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}
