//! Random Forest population models on feature tables, hyperparameter grid
//! search, the training-mean null model and tree-spread uncertainty.

mod grid;
mod model;
mod table;
pub mod tree;

pub use grid::{fold_data, grid_search, grid_search_folds, FoldData, GridScore, GridSearchResult, ParamGrid};
pub use model::{fit, fit_null, predict_with_uncertainty, Forest, ModelKind, PopulationModel, RFConfig, TilePrediction};
pub use table::{FeatureSource, FeatureTable};
