//! Temporary diagnostics for shape-servoing calibration (not shipped).

use loinprep::contour::{converged, mask_stats, projected_variance, sample_tokens, SegMask};
use loinprep::rl::{reward, RlConfig};
use loinprep::sim::{spawn, LoinSpec, ShapeId, SimConfig, SimState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Env {
    cfg: RlConfig,
    sim_cfg: SimConfig,
    state: SimState,
    goal: SegMask,
}

impl Env {
    fn new(cfg: &RlConfig, sim_cfg: &SimConfig, seed: u64, preset: ShapeId) -> Env {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = LoinSpec::new(preset, cfg.loin_length_m, cfg.loin_width_m, cfg.loin_aspect_jitter).unwrap();
        let goal_spec =
            LoinSpec::new(ShapeId::Straight, cfg.loin_length_m, cfg.loin_width_m, cfg.loin_aspect_jitter).unwrap();
        let spawn_seed: u64 = rng.gen();
        let pose = [
            rng.gen_range(-cfg.spawn_offset_m..=cfg.spawn_offset_m),
            rng.gen_range(-cfg.spawn_offset_m..=cfg.spawn_offset_m),
            rng.gen_range(-cfg.spawn_angle_rad..=cfg.spawn_angle_rad),
        ];
        let state = spawn(&spec, pose, spawn_seed, sim_cfg);
        let goal_state = spawn(&goal_spec, [0.0, 0.0, 0.0], spawn_seed, sim_cfg);
        let goal = goal_state.render_mask(cfg.img, cfg.img, cfg.meters_per_px);
        Env {
            cfg: cfg.clone(),
            sim_cfg: sim_cfg.clone(),
            state,
            goal,
        }
    }

    fn mask(&self) -> SegMask {
        self.state.render_mask(self.cfg.img, self.cfg.img, self.cfg.meters_per_px)
    }

    fn push(&self, origin_px: [f64; 2], n: [f64; 2], d_px: f64) -> Option<SimState> {
        let half = (self.cfg.img as f64 - 1.0) / 2.0;
        let r_px = self.sim_cfg.tool_radius / self.cfg.meters_per_px;
        let start = [origin_px[0] - r_px * n[0], origin_px[1] - r_px * n[1]];
        let origin_m = [
            (start[0] - half) * self.cfg.meters_per_px,
            (start[1] - half) * self.cfg.meters_per_px,
        ];
        let v_m = [d_px * n[0] * self.cfg.meters_per_px, d_px * n[1] * self.cfg.meters_per_px];
        self.state.execute_push(origin_m, v_m).ok()
    }

    fn score(&self, mask: &SegMask) -> (f64, f64, f64, bool) {
        let so = mask_stats(mask).unwrap();
        let sg = mask_stats(&self.goal).unwrap();
        let cen = ((sg.centroid[0] - so.centroid[0]).powi(2)
            + (sg.centroid[1] - so.centroid[1]).powi(2))
        .sqrt();
        let ratio = projected_variance(mask, so.centroid, sg.e_min).unwrap() / sg.var_min;
        let iou = reward(mask, &self.goal, false).unwrap();
        let conv = converged(mask, &self.goal, self.cfg.eps1_px, self.cfg.eps2).unwrap();
        (iou, cen, ratio, conv)
    }
}

/// One-step-lookahead oracle: try every valid token at a few push lengths,
/// keep the best outcome. Upper-bounds what a reactive policy can do.
fn lookahead_push(env: &mut Env, d_candidates: &[f64]) -> bool {
    let mask = env.mask();
    if mask.is_empty() {
        return false;
    }
    let r_px = env.sim_cfg.tool_radius / env.cfg.meters_per_px;
    let tokens = match sample_tokens(&mask, env.cfg.arch.n_tokens, r_px) {
        Ok(t) => t,
        Err(_) => return false,
    };
    let mut best: Option<(f64, SimState)> = None;
    for t in tokens.tokens.iter().filter(|t| t.v == 1) {
        for &d in d_candidates {
            if let Some(next) = env.push(t.p, t.n, d) {
                let m = next.render_mask(env.cfg.img, env.cfg.img, env.cfg.meters_per_px);
                if m.is_empty() {
                    continue;
                }
                let (iou, cen, ratio, conv) = env.score(&m);
                let s = if conv {
                    1e9
                } else {
                    iou - 0.25 * (ratio - 1.0).max(0.0) - 0.03 * (cen - 4.0).max(0.0)
                };
                if best.as_ref().map_or(true, |(bs, _)| s > *bs) {
                    best = Some((s, next));
                }
            }
        }
    }
    match best {
        Some((_, next)) => {
            env.state = next;
            true
        }
        None => false,
    }
}

fn run_campaign(
    name: &str,
    cfg: &RlConfig,
    sim_cfg: &SimConfig,
    d_candidates: &[f64],
    budget: usize,
    trials: u64,
) {
    let mut conv = 0;
    let mut pushes_used = Vec::new();
    let mut fails = Vec::new();
    for trial in 0..trials {
        let mut env = Env::new(cfg, sim_cfg, trial, ShapeId::L);
        let mut used = None;
        for push in 0..=budget {
            let (_, _, _, c) = env.score(&env.mask());
            if c {
                used = Some(push);
                break;
            }
            if push == budget || !lookahead_push(&mut env, d_candidates) {
                break;
            }
        }
        match used {
            Some(p) => {
                conv += 1;
                pushes_used.push(p);
            }
            None => {
                let (iou, cen, ratio, _) = env.score(&env.mask());
                fails.push(format!("t{trial}: iou {iou:.2} cen {cen:.1} ratio {ratio:.2}"));
            }
        }
    }
    let mean = if pushes_used.is_empty() {
        0.0
    } else {
        pushes_used.iter().sum::<usize>() as f64 / pushes_used.len() as f64
    };
    println!("[{name}] {conv}/{trials} converged, mean pushes {mean:.1}");
    for f in fails.iter().take(4) {
        println!("    {f}");
    }
}

fn main() {
    let budget = 8;

    let mut base_rl = RlConfig::desk();
    base_rl.spawn_angle_rad = 0.10;
    let d_fine = [8.0, 16.0, 28.0, 40.0];

    let sim = SimConfig {
        tool_radius: 0.025,
        plastic_creep: 0.2,
        ..SimConfig::default()
    };

    run_campaign("chosen, L oracle", &base_rl, &sim, &d_fine, budget, 20);
    run_campaign_preset("chosen, C oracle b12", &base_rl, &sim, &d_fine, 12, 20, ShapeId::C);
    run_campaign_preset("chosen, Z oracle b12", &base_rl, &sim, &d_fine, 12, 20, ShapeId::Z);
    run_campaign_preset("chosen, Z oracle b8", &base_rl, &sim, &d_fine, 8, 20, ShapeId::Z);

    // random baseline: is the task still nontrivial?
    let mut conv_trials = 0;
    for trial in 0..20u64 {
        let mut conv = 0;
        for attempt in 0..20u64 {
            let mut env = Env::new(&base_rl, &sim, trial, ShapeId::L);
            let mut rng = ChaCha8Rng::seed_from_u64(9000 + trial * 100 + attempt);
            let mut ok = false;
            for _ in 0..budget {
                let mask = env.mask();
                if mask.is_empty() {
                    break;
                }
                let r_px = sim.tool_radius / base_rl.meters_per_px;
                let Ok(tokens) = sample_tokens(&mask, base_rl.arch.n_tokens, r_px) else {
                    break;
                };
                let valid: Vec<_> = tokens.tokens.iter().filter(|t| t.v == 1).collect();
                if valid.is_empty() {
                    break;
                }
                let t = valid[rng.gen_range(0..valid.len())];
                let d = rng.gen_range(base_rl.d_min_px..base_rl.d_max_px);
                if let Some(next) = env.push(t.p, t.n, d) {
                    env.state = next;
                }
                let m = env.mask();
                if m.is_empty() {
                    break;
                }
                let (_, _, _, c) = env.score(&m);
                if c {
                    ok = true;
                    break;
                }
            }
            conv += usize::from(ok);
        }
        conv_trials += conv;
    }
    println!("[random baseline] {conv_trials}/400 episodes converged");
}

fn run_campaign_preset(
    name: &str,
    cfg: &RlConfig,
    sim_cfg: &SimConfig,
    d_candidates: &[f64],
    budget: usize,
    trials: u64,
    preset: ShapeId,
) {
    let mut conv = 0;
    let mut pushes_used = Vec::new();
    let mut fails = Vec::new();
    for trial in 0..trials {
        let mut env = Env::new(cfg, sim_cfg, trial, preset);
        let mut used = None;
        for push in 0..=budget {
            let (_, _, _, c) = env.score(&env.mask());
            if c {
                used = Some(push);
                break;
            }
            if push == budget || !lookahead_push(&mut env, d_candidates) {
                break;
            }
        }
        match used {
            Some(p) => {
                conv += 1;
                pushes_used.push(p);
            }
            None => {
                let (iou, cen, ratio, _) = env.score(&env.mask());
                fails.push(format!("t{trial}: iou {iou:.2} cen {cen:.1} ratio {ratio:.2}"));
            }
        }
    }
    let mean = if pushes_used.is_empty() {
        0.0
    } else {
        pushes_used.iter().sum::<usize>() as f64 / pushes_used.len() as f64
    };
    println!("[{name}] {conv}/{trials} converged, mean pushes {mean:.1}");
    for f in fails.iter().take(4) {
        println!("    {f}");
    }
}
