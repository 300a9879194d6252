#![allow(dead_code)]

use nterrain::model::{TerrainModel, TileMeta};
use nterrain::raster::Grid;
use nterrain::rng::SeededRng;
use nterrain::siren::{build_frequency_table, FrequencyConfig, SirenStage};
use nterrain::wavelet::build_features;
use nterrain::wcf::{decode_complexity, ThresholdSet, WcfDecoder};

/// Untrained but fully deterministic model with small stages, nonzero biases.
pub fn small_model(seed: u64) -> TerrainModel {
    let stage = |cfg: FrequencyConfig, omega0: f64, s: u64| {
        let freq = build_frequency_table(s, &cfg).unwrap();
        let mut st = SirenStage::new(freq, omega0, 16, 2, s + 1);
        let mut rng = SeededRng::new(s + 2);
        for l in st.hidden.iter_mut().chain(std::iter::once(&mut st.output)) {
            l.bias.mapv_inplace(|_| rng.uniform_in(-0.1, 0.1));
        }
        st
    };
    let shape = stage(
        FrequencyConfig {
            low_limit: 4,
            edges: vec![],
            sizes: vec![12],
        },
        30.0,
        seed,
    );
    let geom = stage(
        FrequencyConfig {
            low_limit: 3,
            edges: vec![6, 9],
            sizes: vec![8, 4, 4],
        },
        150.0,
        seed + 10,
    );
    let mut rng = SeededRng::new(seed + 20);
    let residual = Grid::from_fn(24, 20, |_, _| rng.uniform_in(-1.0, 1.0));
    let mut decoder = WcfDecoder::new(seed + 30);
    for l in &mut decoder.layers {
        l.bias.mapv_inplace(|_| rng.uniform_in(-0.05, 0.05));
    }
    let field = decode_complexity(&decoder, &build_features(&residual).unwrap()).unwrap();
    TerrainModel {
        shape,
        geom,
        decoder,
        thresholds: ThresholdSet {
            tau1: -0.7,
            deltas: vec![0.3],
        },
        field,
        residual_scale: 0.125,
        use_masks: true,
        meta: TileMeta {
            width: 24,
            height: 20,
            z_min: 310.5,
            z_max: 742.25,
            cell_size: 2.0,
        },
    }
}

/// Every stored parameter, flattened in container order.
pub fn all_params(m: &TerrainModel) -> Vec<f64> {
    let mut out = Vec::new();
    for st in [&m.shape, &m.geom] {
        for l in st.hidden.iter().chain(std::iter::once(&st.output)) {
            out.extend(l.weight.iter().chain(l.bias.iter()));
        }
    }
    for l in &m.decoder.layers {
        out.extend(l.weight.iter().chain(l.bias.iter()));
    }
    out
}
