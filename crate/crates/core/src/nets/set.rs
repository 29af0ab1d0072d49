//! The complete stage-2 network family and its cross-cycle forward pass.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::autodiff::checkpoint::{load_checkpoint, save_checkpoint};
use crate::autodiff::{ParamStore, Tape, Tensor, TensorId};
use crate::error::{Error, Result};
use crate::nets::blocks::{
    extractor_forward, init_au_head, init_domain_disc, init_extractor, init_feature_stack,
    init_landmark_disc, init_landmark_tail, init_projector, reconstruct, separate, Lease,
};
use crate::nets::config::BlockConfig;

pub const N_SUPERVISOR_PAIRS: usize = 6;

/// Handles to the fourteen features produced by one cross-cycle pass.
/// The `_r2` fields come from separating the reconstructed features a
/// second time; `f_s_cycle` and `f_t_cycle` are the cross-cyclically
/// reconstructed originals.
#[derive(Debug, Clone, Copy)]
pub struct FeatureBundle {
    pub f_s: TensorId,
    pub f_t: TensorId,
    pub f_sl: TensorId,
    pub f_sb: TensorId,
    pub f_tl: TensorId,
    pub f_tb: TensorId,
    pub f_sltb: TensorId,
    pub f_sbtl: TensorId,
    pub f_sl_r2: TensorId,
    pub f_sb_r2: TensorId,
    pub f_tl_r2: TensorId,
    pub f_tb_r2: TensorId,
    pub f_s_cycle: TensorId,
    pub f_t_cycle: TensorId,
}

impl FeatureBundle {
    pub fn all(&self) -> [TensorId; 14] {
        [
            self.f_s,
            self.f_t,
            self.f_sl,
            self.f_sb,
            self.f_tl,
            self.f_tb,
            self.f_sltb,
            self.f_sbtl,
            self.f_sl_r2,
            self.f_sb_r2,
            self.f_tl_r2,
            self.f_tb_r2,
            self.f_s_cycle,
            self.f_t_cycle,
        ]
    }

    /// The six supervisor pairs as (reconstructed, original), in the fixed
    /// order whole-source, whole-target, then the four separated parts.
    pub fn supervisor_pairs(&self) -> [(TensorId, TensorId); N_SUPERVISOR_PAIRS] {
        [
            (self.f_s_cycle, self.f_s),
            (self.f_t_cycle, self.f_t),
            (self.f_sl_r2, self.f_sl),
            (self.f_sb_r2, self.f_sb),
            (self.f_tl_r2, self.f_tl),
            (self.f_tb_r2, self.f_tb),
        ]
    }
}

/// All parameter stores of the stage-2 system. E_l, G_b, G_st, D_l, D_d,
/// E_au, and the projectors are single instances shared by the source and
/// target paths.
#[derive(Debug)]
pub struct NetworkSet {
    pub cfg: BlockConfig,
    pub extractor: ParamStore,
    pub landmark_tail: ParamStore,
    pub landmark_encoder: ParamStore,
    pub background_generator: ParamStore,
    pub reconstructor: ParamStore,
    pub landmark_disc: ParamStore,
    pub domain_disc: ParamStore,
    pub au_head: ParamStore,
    projectors: Vec<ParamStore>,
}

impl NetworkSet {
    pub fn new(cfg: BlockConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.feature_channels();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let extractor = init_extractor(&cfg, &mut rng)?;
        let landmark_tail = init_landmark_tail(&cfg, &mut rng)?;
        let landmark_encoder = init_feature_stack(c, c, &mut rng)?;
        let background_generator = init_feature_stack(c, c, &mut rng)?;
        let reconstructor = init_feature_stack(c, 2 * c, &mut rng)?;
        let landmark_disc = init_landmark_disc(&cfg, &mut rng)?;
        let domain_disc = init_domain_disc(&cfg, &mut rng)?;
        let au_head = init_au_head(&cfg, &mut rng)?;
        let mut projectors = Vec::with_capacity(2 * N_SUPERVISOR_PAIRS);
        for _pair in 1..=N_SUPERVISOR_PAIRS {
            for _side in 1..=2 {
                projectors.push(init_projector(&cfg, &mut rng)?);
            }
        }
        Ok(NetworkSet {
            cfg,
            extractor,
            landmark_tail,
            landmark_encoder,
            background_generator,
            reconstructor,
            landmark_disc,
            domain_disc,
            au_head,
            projectors,
        })
    }

    /// Projector for supervisor pair `pair` (1..=6), side `side` (1 for the
    /// reconstructed feature, 2 for the original).
    pub fn projector(&self, pair: usize, side: usize) -> Result<&ParamStore> {
        if !(1..=N_SUPERVISOR_PAIRS).contains(&pair) || !(1..=2).contains(&side) {
            return Err(Error::Config(format!(
                "projector index ({pair}, {side}) out of range"
            )));
        }
        Ok(&self.projectors[(pair - 1) * 2 + (side - 1)])
    }

    pub fn projector_mut(&mut self, pair: usize, side: usize) -> Result<&mut ParamStore> {
        if !(1..=N_SUPERVISOR_PAIRS).contains(&pair) || !(1..=2).contains(&side) {
            return Err(Error::Config(format!(
                "projector index ({pair}, {side}) out of range"
            )));
        }
        Ok(&mut self.projectors[(pair - 1) * 2 + (side - 1)])
    }

    /// Fixed store naming, also used in checkpoints.
    pub fn store_names(&self) -> Vec<String> {
        let mut names = vec![
            "extractor".to_string(),
            "landmark_tail".to_string(),
            "landmark_encoder".to_string(),
            "background_generator".to_string(),
            "reconstructor".to_string(),
            "landmark_disc".to_string(),
            "domain_disc".to_string(),
            "au_head".to_string(),
        ];
        for pair in 1..=N_SUPERVISOR_PAIRS {
            for side in 1..=2 {
                names.push(format!("projector_{pair}_{side}"));
            }
        }
        names
    }

    pub fn store(&self, name: &str) -> Result<&ParamStore> {
        match name {
            "extractor" => Ok(&self.extractor),
            "landmark_tail" => Ok(&self.landmark_tail),
            "landmark_encoder" => Ok(&self.landmark_encoder),
            "background_generator" => Ok(&self.background_generator),
            "reconstructor" => Ok(&self.reconstructor),
            "landmark_disc" => Ok(&self.landmark_disc),
            "domain_disc" => Ok(&self.domain_disc),
            "au_head" => Ok(&self.au_head),
            other => match parse_projector_name(other) {
                Some((pair, side)) => self.projector(pair, side),
                None => Err(Error::UnknownParam(format!("no store named '{other}'"))),
            },
        }
    }

    pub fn store_mut(&mut self, name: &str) -> Result<&mut ParamStore> {
        match name {
            "extractor" => Ok(&mut self.extractor),
            "landmark_tail" => Ok(&mut self.landmark_tail),
            "landmark_encoder" => Ok(&mut self.landmark_encoder),
            "background_generator" => Ok(&mut self.background_generator),
            "reconstructor" => Ok(&mut self.reconstructor),
            "landmark_disc" => Ok(&mut self.landmark_disc),
            "domain_disc" => Ok(&mut self.domain_disc),
            "au_head" => Ok(&mut self.au_head),
            other => match parse_projector_name(other) {
                Some((pair, side)) => self.projector_mut(pair, side),
                None => Err(Error::UnknownParam(format!("no store named '{other}'"))),
            },
        }
    }

    /// Deep copy of every store under fresh uids, optimizer state included.
    pub fn snapshot(&self) -> NetworkSet {
        NetworkSet {
            cfg: self.cfg.clone(),
            extractor: self.extractor.duplicate(),
            landmark_tail: self.landmark_tail.duplicate(),
            landmark_encoder: self.landmark_encoder.duplicate(),
            background_generator: self.background_generator.duplicate(),
            reconstructor: self.reconstructor.duplicate(),
            landmark_disc: self.landmark_disc.duplicate(),
            domain_disc: self.domain_disc.duplicate(),
            au_head: self.au_head.duplicate(),
            projectors: self.projectors.iter().map(|p| p.duplicate()).collect(),
        }
    }

    pub fn total_elements(&self) -> usize {
        self.store_names()
            .iter()
            .map(|n| self.store(n).expect("known name").total_elements())
            .sum()
    }

    /// Extract, separate, reconstruct across domains, separate again, and
    /// rebuild the originals. Generator-side parameters are leased for
    /// training; discriminators are not involved here.
    pub fn full_graph_forward(
        &self,
        tape: &mut Tape,
        i_s: &Tensor,
        i_t: &Tensor,
    ) -> Result<FeatureBundle> {
        if i_s.shape() != i_t.shape() {
            return Err(Error::Shape {
                op: "full_graph_forward",
                detail: format!("source {:?} vs target {:?}", i_s.shape(), i_t.shape()),
            });
        }
        let mode = Lease::Train;
        let i_s = tape.constant(i_s)?;
        let i_t = tape.constant(i_t)?;
        let f_s = extractor_forward(&self.cfg, tape, &self.extractor, i_s, mode)?;
        let f_t = extractor_forward(&self.cfg, tape, &self.extractor, i_t, mode)?;

        let (f_sl, f_sb) =
            separate(tape, &self.landmark_encoder, &self.background_generator, f_s, mode)?;
        let (f_tl, f_tb) =
            separate(tape, &self.landmark_encoder, &self.background_generator, f_t, mode)?;

        let f_sltb = reconstruct(tape, &self.reconstructor, f_sl, f_tb, mode)?;
        let f_sbtl = reconstruct(tape, &self.reconstructor, f_sb, f_tl, mode)?;

        // Second round: E_l recovers the landmark half, G_b the background
        // half, so F_sltb yields (F_sl', F_tb') and F_sbtl yields (F_tl', F_sb').
        let (f_sl_r2, f_tb_r2) =
            separate(tape, &self.landmark_encoder, &self.background_generator, f_sltb, mode)?;
        let (f_tl_r2, f_sb_r2) =
            separate(tape, &self.landmark_encoder, &self.background_generator, f_sbtl, mode)?;

        let f_s_cycle = reconstruct(tape, &self.reconstructor, f_sl_r2, f_sb_r2, mode)?;
        let f_t_cycle = reconstruct(tape, &self.reconstructor, f_tl_r2, f_tb_r2, mode)?;

        Ok(FeatureBundle {
            f_s,
            f_t,
            f_sl,
            f_sb,
            f_tl,
            f_tb,
            f_sltb,
            f_sbtl,
            f_sl_r2,
            f_sb_r2,
            f_tl_r2,
            f_tb_r2,
            f_s_cycle,
            f_t_cycle,
        })
    }

    pub fn save(&self, path: &Path, extra_meta: serde_json::Value) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "network_set",
            "block_config": self.cfg,
            "extra": extra_meta,
        });
        let names = self.store_names();
        let pairs: Vec<(&str, &ParamStore)> = names
            .iter()
            .map(|n| (n.as_str(), self.store(n).expect("known name")))
            .collect();
        save_checkpoint(path, &pairs, &meta)
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let (stores, meta) = load_checkpoint(path)?;
        if meta.get("kind").and_then(|v| v.as_str()) != Some("network_set") {
            return Err(Error::Checkpoint(
                "checkpoint does not hold a network set".into(),
            ));
        }
        let cfg: BlockConfig = serde_json::from_value(
            meta.get("block_config")
                .cloned()
                .ok_or_else(|| Error::Checkpoint("missing block_config metadata".into()))?,
        )
        .map_err(|e| Error::Checkpoint(format!("bad block_config metadata: {e}")))?;
        let mut set = NetworkSet::new(cfg, 0)?;
        let expected = set.store_names();
        let mut seen = Vec::new();
        for (name, store) in stores {
            if !expected.contains(&name) {
                return Err(Error::Checkpoint(format!("unexpected store '{name}'")));
            }
            let dst = set.store_mut(&name)?;
            *dst = store;
            seen.push(name);
        }
        for name in &expected {
            if !seen.contains(name) {
                return Err(Error::Checkpoint(format!("store '{name}' missing")));
            }
        }
        let extra = meta.get("extra").cloned().unwrap_or(serde_json::Value::Null);
        Ok((set, extra))
    }
}

fn parse_projector_name(name: &str) -> Option<(usize, usize)> {
    let rest = name.strip_prefix("projector_")?;
    let (pair, side) = rest.split_once('_')?;
    Some((pair.parse().ok()?, side.parse().ok()?))
}

// ── Hand-built exact separation weights ────────────────────────────────

/// Which reference weight family [`install_perfect_separation`] writes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeparationOracle {
    /// E_l and G_b become identities; G_st returns its first input.
    /// Makes the source cycle exact: F_s' == F_s bit for bit.
    FirstInput,
    /// E_l keeps the first half of the channels, G_b the second half,
    /// and G_st adds the two halves of its concatenated input. Both
    /// cycles are exact and every round-2 feature equals its round-1
    /// counterpart. Needs an even feature channel count.
    SplitChannels,
}

/// Overwrite E_l, G_b, and G_st with hand-built weights under which
/// separation and reconstruction compose to exact identities on the
/// non-negative features the extractor emits. Used to validate the
/// cross-cycle wiring independently of training.
pub fn install_perfect_separation(set: &mut NetworkSet, oracle: SeparationOracle) -> Result<()> {
    let c = set.cfg.feature_channels();
    // Center-tap 3x3 kernels: out channel o copies in channel map(o).
    let tap = |c_out: usize, c_in: usize, taps: &[(usize, usize)]| -> Tensor {
        let mut w = vec![0.0; c_out * c_in * 9];
        for &(o, i) in taps {
            w[((o * c_in + i) * 3 + 1) * 3 + 1] = 1.0;
        }
        Tensor::new(vec![c_out, c_in, 3, 3], w).expect("valid kernel shape")
    };
    let identity: Vec<(usize, usize)> = (0..c).map(|o| (o, o)).collect();

    let (el_taps, gb_taps, gst_taps): (Vec<_>, Vec<_>, Vec<_>) = match oracle {
        SeparationOracle::FirstInput => (
            identity.clone(),
            identity.clone(),
            (0..c).map(|o| (o, o)).collect(),
        ),
        SeparationOracle::SplitChannels => {
            if c % 2 != 0 {
                return Err(Error::Config(format!(
                    "split-channel oracle needs even feature channels, got {c}"
                )));
            }
            (
                (0..c / 2).map(|o| (o, o)).collect(),
                (c / 2..c).map(|o| (o, o)).collect(),
                (0..c).flat_map(|o| [(o, o), (o, c + o)]).collect(),
            )
        }
    };

    for (store, first_taps, c_in) in [
        (&mut set.landmark_encoder, el_taps, c),
        (&mut set.background_generator, gb_taps, c),
        (&mut set.reconstructor, gst_taps, 2 * c),
    ] {
        store.set_value("conv1.w", &tap(c, c_in, &first_taps))?;
        store.set_value("conv1.b", &Tensor::zeros(&[c]))?;
        for layer in ["conv2", "conv3"] {
            store.set_value(&format!("{layer}.w"), &tap(c, c, &identity))?;
            store.set_value(&format!("{layer}.b"), &Tensor::zeros(&[c]))?;
        }
    }
    Ok(())
}
