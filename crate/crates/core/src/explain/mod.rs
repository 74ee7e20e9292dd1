//! Tile-level explanations for the linear regression head and 2-D projections
//! of representations.

mod ram;
mod tsne;

pub use ram::{activation_map_from_features, regression_activation_map, ActivationMap, DISPLAY_SIDE};
pub use tsne::{project_embeddings, write_embedding_csv, EmbeddingPoint, TsneConfig};
