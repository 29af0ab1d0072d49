//! Parameter layouts and forward passes for the individual network blocks.
//!
//! Blocks are plain functions over a [`Tape`] plus the [`ParamStore`] that
//! owns their weights. The [`Lease`] argument decides whether the pass
//! contributes gradients (training) or treats the weights as constants
//! (the frozen side of a minimax step).

use rand_chacha::ChaCha20Rng;

use crate::autodiff::tensor::dims4;
use crate::autodiff::{ParamStore, Tape, Tensor, TensorId};
use crate::error::{Error, Result};
use crate::nets::config::BlockConfig;

/// How a forward pass borrows parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lease {
    Train,
    Frozen,
}

fn lease(tape: &mut Tape, store: &ParamStore, name: &str, mode: Lease) -> Result<TensorId> {
    match mode {
        Lease::Train => tape.param(store, name),
        Lease::Frozen => tape.frozen(store, name),
    }
}

fn conv_weight(rng: &mut ChaCha20Rng, c_out: usize, c_in: usize, k: usize) -> Tensor {
    let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
    Tensor::uniform(&[c_out, c_in, k, k], bound, rng)
}

fn linear_weight(rng: &mut ChaCha20Rng, d_out: usize, d_in: usize) -> Tensor {
    let bound = 1.0 / (d_in as f64).sqrt();
    Tensor::uniform(&[d_out, d_in], bound, rng)
}

// Biases start at a small positive constant rather than zero: an all-zero
// input patch (dead upstream units or padding) would otherwise put a relu
// pre-activation exactly on its kink, where analytic and finite-difference
// gradients legitimately disagree.
const BIAS_INIT: f64 = 0.01;

fn add_conv(
    store: &mut ParamStore,
    prefix: &str,
    c_out: usize,
    c_in: usize,
    k: usize,
    rng: &mut ChaCha20Rng,
) -> Result<()> {
    store.insert(&format!("{prefix}.w"), conv_weight(rng, c_out, c_in, k))?;
    store.insert(&format!("{prefix}.b"), Tensor::filled(&[c_out], BIAS_INIT))?;
    Ok(())
}

fn add_linear(
    store: &mut ParamStore,
    prefix: &str,
    d_out: usize,
    d_in: usize,
    rng: &mut ChaCha20Rng,
) -> Result<()> {
    store.insert(&format!("{prefix}.w"), linear_weight(rng, d_out, d_in))?;
    store.insert(&format!("{prefix}.b"), Tensor::filled(&[d_out], BIAS_INIT))?;
    Ok(())
}

fn conv_forward(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    x: TensorId,
    stride: usize,
    padding: usize,
    mode: Lease,
) -> Result<TensorId> {
    let w = lease(tape, store, &format!("{prefix}.w"), mode)?;
    let b = lease(tape, store, &format!("{prefix}.b"), mode)?;
    tape.conv2d(x, w, b, stride, padding)
}

fn linear_forward(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    x: TensorId,
    mode: Lease,
) -> Result<TensorId> {
    let w = lease(tape, store, &format!("{prefix}.w"), mode)?;
    let b = lease(tape, store, &format!("{prefix}.b"), mode)?;
    tape.linear(x, w, b)
}

// ── Convolutional parts ────────────────────────────────────────────────

fn add_part(
    store: &mut ParamStore,
    part: usize,
    c_in: usize,
    c_out: usize,
    rng: &mut ChaCha20Rng,
) -> Result<()> {
    add_conv(store, &format!("part{part}.conv1"), c_out, c_in, 3, rng)?;
    add_conv(store, &format!("part{part}.conv2"), c_out, c_out, 3, rng)?;
    Ok(())
}

/// One part: two padded 3x3 convolutions with relu, then 2x2 mean pooling.
fn part_forward(
    tape: &mut Tape,
    store: &ParamStore,
    part: usize,
    x: TensorId,
    mode: Lease,
) -> Result<TensorId> {
    let c1 = conv_forward(tape, store, &format!("part{part}.conv1"), x, 1, 1, mode)?;
    let a1 = tape.relu(c1)?;
    let c2 = conv_forward(tape, store, &format!("part{part}.conv2"), a1, 1, 1, mode)?;
    let a2 = tape.relu(c2)?;
    tape.avgpool2(a2)
}

fn part_in_channels(cfg: &BlockConfig, part: usize) -> usize {
    if part == 1 {
        cfg.in_channels
    } else {
        cfg.widths[part - 2]
    }
}

fn check_image(cfg: &BlockConfig, tape: &Tape, image: TensorId) -> Result<()> {
    let d = dims4("image input", tape.shape(image))?;
    if d.c != cfg.in_channels || d.h != cfg.resolution || d.w != cfg.resolution {
        return Err(Error::Shape {
            op: "image input",
            detail: format!(
                "expected [n, {}, {}, {}], got {:?}",
                cfg.in_channels,
                cfg.resolution,
                cfg.resolution,
                tape.shape(image)
            ),
        });
    }
    Ok(())
}

// ── CBAM attention ─────────────────────────────────────────────────────

pub fn add_cbam_params(
    store: &mut ParamStore,
    prefix: &str,
    channels: usize,
    hidden: usize,
    rng: &mut ChaCha20Rng,
) -> Result<()> {
    add_linear(store, &format!("{prefix}.mlp1"), hidden, channels, rng)?;
    add_linear(store, &format!("{prefix}.mlp2"), channels, hidden, rng)?;
    add_conv(store, &format!("{prefix}.spatial"), 1, 2, 7, rng)?;
    Ok(())
}

/// Channel attention (shared two-layer MLP over pooled descriptors) followed
/// by spatial attention (7x7 convolution over channel-wise mean and max
/// maps). Output shape equals input shape.
pub fn cbam_forward(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    x: TensorId,
    mode: Lease,
) -> Result<TensorId> {
    let mlp = |tape: &mut Tape, descr: TensorId| -> Result<TensorId> {
        let h = linear_forward(tape, store, &format!("{prefix}.mlp1"), descr, mode)?;
        let h = tape.relu(h)?;
        linear_forward(tape, store, &format!("{prefix}.mlp2"), h, mode)
    };
    let avg = tape.global_avg_pool(x)?;
    let max = tape.global_max_pool(x)?;
    let a = mlp(tape, avg)?;
    let m = mlp(tape, max)?;
    let s = tape.add(a, m)?;
    let gate_c = tape.sigmoid(s)?;
    let x = tape.mul_channel_gate(x, gate_c)?;

    let mean_map = tape.channel_mean(x)?;
    let max_map = tape.channel_max(x)?;
    let cat = tape.concat_channel(mean_map, max_map)?;
    let conv = conv_forward(tape, store, &format!("{prefix}.spatial"), cat, 1, 3, mode)?;
    let gate_s = tape.sigmoid(conv)?;
    tape.mul_spatial_gate(x, gate_s)
}

// ── Landmark branch (stage 1) ──────────────────────────────────────────

/// Full five-part branch with CBAM and the two-layer coordinate head.
pub fn init_landmark_branch(cfg: &BlockConfig, rng: &mut ChaCha20Rng) -> Result<ParamStore> {
    cfg.validate()?;
    let head_in = cfg.head_input_len()?;
    let mut store = ParamStore::new();
    for part in 1..=5 {
        add_part(&mut store, part, part_in_channels(cfg, part), cfg.widths[part - 1], rng)?;
    }
    add_cbam_params(&mut store, "cbam", cfg.widths[4], cfg.cbam_hidden(), rng)?;
    add_linear(&mut store, "fc1", cfg.fc_hidden, head_in, rng)?;
    add_linear(&mut store, "fc2", 2 * cfg.n_land, cfg.fc_hidden, rng)?;
    Ok(store)
}

/// Run parts 1..=upto of the branch, returning the pooled feature map.
pub fn branch_parts_forward(
    cfg: &BlockConfig,
    tape: &mut Tape,
    store: &ParamStore,
    image: TensorId,
    upto: usize,
    mode: Lease,
) -> Result<TensorId> {
    check_image(cfg, tape, image)?;
    let mut x = image;
    for part in 1..=upto {
        x = part_forward(tape, store, part, x, mode)?;
    }
    Ok(x)
}

fn head_forward(
    tape: &mut Tape,
    store: &ParamStore,
    feat: TensorId,
    mode: Lease,
) -> Result<TensorId> {
    let cb = cbam_forward(tape, store, "cbam", feat, mode)?;
    let flat = tape.flatten(cb)?;
    let h = linear_forward(tape, store, "fc1", flat, mode)?;
    let h = tape.relu(h)?;
    linear_forward(tape, store, "fc2", h, mode)
}

/// Image to interleaved normalized (x, y) coordinates, length 2*n_land.
pub fn landmark_branch_forward(
    cfg: &BlockConfig,
    tape: &mut Tape,
    store: &ParamStore,
    image: TensorId,
    mode: Lease,
) -> Result<TensorId> {
    let feat = branch_parts_forward(cfg, tape, store, image, 5, mode)?;
    head_forward(tape, store, feat, mode)
}

// ── Feature extractor (parts 1-2) ──────────────────────────────────────

pub fn init_extractor(cfg: &BlockConfig, rng: &mut ChaCha20Rng) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    for part in 1..=2 {
        add_part(&mut store, part, part_in_channels(cfg, part), cfg.widths[part - 1], rng)?;
    }
    Ok(store)
}

/// Image to quarter-resolution features, channels = widths[1].
pub fn extractor_forward(
    cfg: &BlockConfig,
    tape: &mut Tape,
    store: &ParamStore,
    image: TensorId,
    mode: Lease,
) -> Result<TensorId> {
    check_image(cfg, tape, image)?;
    let mut x = image;
    for part in 1..=2 {
        x = part_forward(tape, store, part, x, mode)?;
    }
    Ok(x)
}

// ── Landmark tail (parts 3-5 + CBAM + head, stage 2) ──────────────────

pub fn init_landmark_tail(cfg: &BlockConfig, rng: &mut ChaCha20Rng) -> Result<ParamStore> {
    cfg.validate()?;
    let head_in = cfg.head_input_len()?;
    let mut store = ParamStore::new();
    for part in 3..=5 {
        add_part(&mut store, part, part_in_channels(cfg, part), cfg.widths[part - 1], rng)?;
    }
    add_cbam_params(&mut store, "cbam", cfg.widths[4], cfg.cbam_hidden(), rng)?;
    add_linear(&mut store, "fc1", cfg.fc_hidden, head_in, rng)?;
    add_linear(&mut store, "fc2", 2 * cfg.n_land, cfg.fc_hidden, rng)?;
    Ok(store)
}

/// Extracted features to coordinates through parts 3-5, CBAM, and the head.
pub fn landmark_tail_forward(
    cfg: &BlockConfig,
    tape: &mut Tape,
    store: &ParamStore,
    features: TensorId,
    mode: Lease,
) -> Result<TensorId> {
    let d = dims4("landmark tail input", tape.shape(features))?;
    if d.c != cfg.feature_channels() || d.h != cfg.feature_size() || d.w != cfg.feature_size() {
        return Err(Error::Shape {
            op: "landmark tail input",
            detail: format!(
                "expected [n, {}, {}, {}], got {:?}",
                cfg.feature_channels(),
                cfg.feature_size(),
                cfg.feature_size(),
                tape.shape(features)
            ),
        });
    }
    let mut x = features;
    for part in 3..=5 {
        x = part_forward(tape, store, part, x, mode)?;
    }
    head_forward(tape, store, x, mode)
}

/// Copy pretrained branch weights into a structurally equal destination.
/// Every parameter of `dst` must exist in `branch` with the same shape;
/// mismatches are listed in the error. Values are copied, never aliased.
pub fn transfer_init(dst: &mut ParamStore, branch: &ParamStore) -> Result<usize> {
    let mut problems = Vec::new();
    for name in dst.names() {
        match branch.value(name) {
            Ok(src) => {
                let dst_shape = dst.value(name)?.shape();
                if dst_shape != src.shape() {
                    problems.push(format!(
                        "'{name}': destination {:?} vs source {:?}",
                        dst_shape,
                        src.shape()
                    ));
                }
            }
            Err(_) => problems.push(format!("'{name}': missing from source branch")),
        }
    }
    if !problems.is_empty() {
        return Err(Error::Train(format!(
            "structural mismatch blocks weight transfer: {}",
            problems.join("; ")
        )));
    }
    dst.copy_matching_values(branch)
}

// ── Separation and reconstruction stacks ──────────────────────────────

/// Three shape-preserving 3x3 convolutions; relu after the first two, the
/// last layer stays linear. Serves E_l and G_b (c_in == c_out) and G_st
/// (c_in == 2*c_out).
pub fn init_feature_stack(
    c_out: usize,
    c_in: usize,
    rng: &mut ChaCha20Rng,
) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    add_conv(&mut store, "conv1", c_out, c_in, 3, rng)?;
    add_conv(&mut store, "conv2", c_out, c_out, 3, rng)?;
    add_conv(&mut store, "conv3", c_out, c_out, 3, rng)?;
    Ok(store)
}

pub fn feature_stack_forward(
    tape: &mut Tape,
    store: &ParamStore,
    x: TensorId,
    mode: Lease,
) -> Result<TensorId> {
    let c1 = conv_forward(tape, store, "conv1", x, 1, 1, mode)?;
    let a1 = tape.relu(c1)?;
    let c2 = conv_forward(tape, store, "conv2", a1, 1, 1, mode)?;
    let a2 = tape.relu(c2)?;
    conv_forward(tape, store, "conv3", a2, 1, 1, mode)
}

/// Landmark-related and background features from one feature map, through
/// the shared E_l and G_b stacks.
pub fn separate(
    tape: &mut Tape,
    landmark_encoder: &ParamStore,
    background_generator: &ParamStore,
    features: TensorId,
    mode: Lease,
) -> Result<(TensorId, TensorId)> {
    let f_land = feature_stack_forward(tape, landmark_encoder, features, mode)?;
    let f_back = feature_stack_forward(tape, background_generator, features, mode)?;
    Ok((f_land, f_back))
}

/// G_st over the channel concatenation of a landmark feature and a
/// background feature of equal shape.
pub fn reconstruct(
    tape: &mut Tape,
    reconstructor: &ParamStore,
    f_land: TensorId,
    f_back: TensorId,
    mode: Lease,
) -> Result<TensorId> {
    if tape.shape(f_land) != tape.shape(f_back) {
        return Err(Error::Shape {
            op: "reconstruct",
            detail: format!(
                "landmark {:?} vs background {:?}",
                tape.shape(f_land),
                tape.shape(f_back)
            ),
        });
    }
    let cat = tape.concat_channel(f_land, f_back)?;
    feature_stack_forward(tape, reconstructor, cat, mode)
}

// ── Discriminators and AU head ─────────────────────────────────────────

fn init_disc_trunk(
    store: &mut ParamStore,
    c_in: usize,
    hidden: usize,
    rng: &mut ChaCha20Rng,
) -> Result<()> {
    add_conv(store, "conv1", hidden, c_in, 3, rng)?;
    add_conv(store, "conv2", hidden, hidden, 3, rng)?;
    add_conv(store, "conv3", hidden, hidden, 3, rng)?;
    Ok(())
}

fn disc_trunk_forward(
    tape: &mut Tape,
    store: &ParamStore,
    x: TensorId,
    mode: Lease,
) -> Result<TensorId> {
    let mut h = x;
    for name in ["conv1", "conv2", "conv3"] {
        h = conv_forward(tape, store, name, h, 1, 1, mode)?;
        h = tape.relu(h)?;
    }
    tape.global_avg_pool(h)
}

pub fn init_landmark_disc(cfg: &BlockConfig, rng: &mut ChaCha20Rng) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    init_disc_trunk(&mut store, cfg.feature_channels(), cfg.disc_hidden, rng)?;
    add_linear(&mut store, "fc", 2 * cfg.n_land, cfg.disc_hidden, rng)?;
    Ok(store)
}

/// D_l regresses coordinates straight from a feature map.
pub fn d_landmark_forward(
    tape: &mut Tape,
    store: &ParamStore,
    features: TensorId,
    mode: Lease,
) -> Result<TensorId> {
    let pooled = disc_trunk_forward(tape, store, features, mode)?;
    linear_forward(tape, store, "fc", pooled, mode)
}

pub fn init_domain_disc(cfg: &BlockConfig, rng: &mut ChaCha20Rng) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    init_disc_trunk(&mut store, cfg.feature_channels(), cfg.disc_hidden, rng)?;
    add_linear(&mut store, "fc", 1, cfg.disc_hidden, rng)?;
    Ok(store)
}

/// D_d scores each batch element in (0,1); 1 means source-domain style.
pub fn d_domain_forward(
    tape: &mut Tape,
    store: &ParamStore,
    features: TensorId,
    mode: Lease,
) -> Result<TensorId> {
    let pooled = disc_trunk_forward(tape, store, features, mode)?;
    let logit = linear_forward(tape, store, "fc", pooled, mode)?;
    tape.sigmoid(logit)
}

pub fn init_au_head(cfg: &BlockConfig, rng: &mut ChaCha20Rng) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    init_disc_trunk(&mut store, cfg.feature_channels(), cfg.disc_hidden, rng)?;
    add_linear(&mut store, "fc", cfg.n_au, cfg.disc_hidden, rng)?;
    Ok(store)
}

/// Per-AU occurrence probabilities in (0,1), shape [n, n_au].
pub fn au_head_forward(
    tape: &mut Tape,
    store: &ParamStore,
    features: TensorId,
    mode: Lease,
) -> Result<TensorId> {
    let pooled = disc_trunk_forward(tape, store, features, mode)?;
    let logit = linear_forward(tape, store, "fc", pooled, mode)?;
    tape.sigmoid(logit)
}

// ── Projectors ─────────────────────────────────────────────────────────

pub fn init_projector(cfg: &BlockConfig, rng: &mut ChaCha20Rng) -> Result<ParamStore> {
    let c = cfg.feature_channels();
    let mut store = ParamStore::new();
    add_conv(&mut store, "proj", c, c, 1, rng)?;
    Ok(store)
}

/// 1x1 convolution onto the comparison space, or a pass-through when the
/// config requests identity projectors.
pub fn project(
    cfg: &BlockConfig,
    tape: &mut Tape,
    store: &ParamStore,
    x: TensorId,
    mode: Lease,
) -> Result<TensorId> {
    if cfg.identity_projectors {
        return Ok(x);
    }
    conv_forward(tape, store, "proj", x, 1, 0, mode)
}
