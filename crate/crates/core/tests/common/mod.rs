//! A small trained pipeline shared by the integration tests.

use std::sync::OnceLock;

use siw_core::dataset::{generate, ParameterGrid, SplitSpec, TargetMode};
use siw_core::pipeline::{HiddenWidths, ModelKind, PipelineBundle, PipelineConfig, PreparedData};
use siw_core::wave::{FrequencyGrid, Geometry, Spectrum, SubstrateSpec};

pub fn small_config() -> PipelineConfig {
    let mut c = PipelineConfig::new(42);
    c.hidden = HiddenWidths {
        fim: vec![64, 32, 16],
        ffm: vec![16, 32, 64],
        corrector: vec![16, 16],
    };
    c.fim.max_epochs = 120;
    c.fim.batch_size = 32;
    c.ffm.max_epochs = 60;
    c.rrm.max_epochs = 60;
    c.corrector.max_epochs = 30;
    c
}

pub fn data() -> &'static PreparedData {
    static DATA: OnceLock<PreparedData> = OnceLock::new();
    DATA.get_or_init(|| {
        let grid = ParameterGrid {
            d_values: vec![4.0, 5.5, 7.0, 8.5],
            r_values: vec![0.2, 0.4, 0.6, 0.8],
            g_values: vec![26.0, 31.0, 36.0],
        };
        let fgrid = FrequencyGrid::new(9.0, 20.0, 61).unwrap();
        let mut ds = generate(&grid, &SubstrateSpec::default(), &fgrid).unwrap();
        ds.prepare(SplitSpec::default(), TargetMode::Minmax).unwrap();
        PreparedData::from_dataset(&ds).unwrap()
    })
}

pub fn bundle() -> &'static PipelineBundle {
    static BUNDLE: OnceLock<PipelineBundle> = OnceLock::new();
    BUNDLE.get_or_init(|| {
        let mut b = PipelineBundle::new(data(), small_config());
        for k in ModelKind::ALL {
            b.train(data(), k).unwrap();
        }
        b
    })
}

pub fn reference_spectrum() -> Spectrum {
    siw_core::wave::simulate(
        &SubstrateSpec::default(),
        &Geometry::reference(),
        &data().frequency_grid,
    )
    .unwrap()
}
