//! Network blocks: landmark branch, extractor, separation and
//! reconstruction stacks, discriminators, AU head, and projectors.

pub mod blocks;
pub mod config;
pub mod set;

pub use blocks::{
    au_head_forward, branch_parts_forward, cbam_forward, d_domain_forward, d_landmark_forward,
    extractor_forward, feature_stack_forward, init_au_head, init_domain_disc, init_extractor,
    init_feature_stack, init_landmark_branch, init_landmark_disc, init_landmark_tail,
    init_projector, landmark_branch_forward, landmark_tail_forward, project, reconstruct,
    separate, transfer_init, Lease,
};
pub use config::BlockConfig;
pub use set::{
    install_perfect_separation, FeatureBundle, NetworkSet, SeparationOracle, N_SUPERVISOR_PAIRS,
};
