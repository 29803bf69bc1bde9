//! Synthetic scenes with known answers, toy bundles and the variant fitter.

pub mod ablation;
pub mod batch;
pub mod bundle;
pub mod scene;

pub use ablation::{fit_micro_variants, format_table, FitConfig, FitMetrics, Variant, VariantReport};
pub use batch::{write_batch, BatchConfig, BatchManifest};
pub use bundle::toy_bundle;
pub use scene::{
    coordinate_embedding, generate_scene, perturb_prediction, render_layout, sample_layout, scene_seed, Interval,
    PerturbConfig, Rect, Scene, SceneLayout, SceneManifest, SceneSpec,
};
