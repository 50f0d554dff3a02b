// SPDX-License-Identifier: Apache-2.0

//! Temporal sequence selection over parameter segments.

pub mod bench;
pub mod embed;
pub mod head;
pub mod io;
pub mod library;
pub mod runtime;
pub mod train;

pub use bench::{benchmark_selection, LatencyReport};
pub use embed::{EmbedderConfig, SegmentEmbedder, EMBED_DIM};
pub use head::{score_all, select_cached, select_segment, PreparedScorer, ProjectionCache, ScoringHead, Selection};
pub use io::{load_library, save_library};
pub use library::{build_library, LibraryParams, Segment, SegmentLibrary, SourceInfo, SourceRegion};
pub use runtime::{act_with_selection, apply_segment, command_with_segment, restore_segment, SelectionRecord, TssRuntime};
pub use train::{head_examples, train_head, HeadExample, HeadTrainConfig, HeadTrainReport};
