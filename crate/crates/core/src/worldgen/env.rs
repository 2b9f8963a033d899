use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Discrete moves. Ids are stable and used in every file format.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Up = 0,
    Down = 1,
    Left = 2,
    Right = 3,
    Stay = 4,
}

impl Action {
    pub const COUNT: usize = 5;
    pub const ALL: [Action; 5] = [
        Action::Up,
        Action::Down,
        Action::Left,
        Action::Right,
        Action::Stay,
    ];

    pub fn from_id(id: usize) -> Result<Self> {
        Self::ALL.get(id).copied().ok_or(Error::InvalidAction {
            action: id,
            count: Self::COUNT,
        })
    }

    pub fn id(self) -> usize {
        self as usize
    }

    /// (dx, dy) unit displacement; y grows downwards.
    fn delta(self) -> (i64, i64) {
        match self {
            Action::Up => (0, -1),
            Action::Down => (0, 1),
            Action::Left => (-1, 0),
            Action::Right => (1, 0),
            Action::Stay => (0, 0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistractorLevel {
    None,
    /// Texture drawn once per episode.
    Easy,
    /// Texture redrawn every step.
    Medium,
    /// Medium plus an agent-like decoy on an action-independent random walk.
    Hard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    /// Grid height and width in pixels.
    pub size: usize,
    pub channels: usize,
    /// Side of the square agent patch (odd).
    pub footprint: usize,
    pub step_size: usize,
    pub level: DistractorLevel,
    pub amplitude: f32,
    pub decoy_step: usize,
    /// Frames per episode.
    pub episode_len: usize,
    /// Goal cell as (x, y); defaults to the grid centre.
    pub goal: Option<(usize, usize)>,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            size: 32,
            channels: 3,
            footprint: 3,
            step_size: 2,
            level: DistractorLevel::Medium,
            amplitude: 0.3,
            decoy_step: 2,
            episode_len: 40,
            goal: None,
        }
    }
}

/// Colour of the agent patch, channel by channel (extra channels use the last).
pub const AGENT_COLOR: [f32; 3] = [1.0, 0.2, 0.2];

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("env: {m}")));
        if self.footprint == 0 || self.footprint % 2 == 0 {
            return bad("footprint must be odd and positive");
        }
        if self.footprint > self.size {
            return bad("footprint does not fit inside the grid");
        }
        if self.channels == 0 || self.step_size == 0 || self.episode_len < 2 {
            return bad("channels, step size and episode length must be positive");
        }
        if !(0.0..=1.0).contains(&self.amplitude) {
            return bad("amplitude must lie in [0, 1]");
        }
        if let Some((x, y)) = self.goal {
            if !(self.lo()..=self.hi()).contains(&x) || !(self.lo()..=self.hi()).contains(&y) {
                return bad("goal must keep the footprint inside the grid");
            }
        }
        Ok(())
    }

    /// Smallest legal centre coordinate.
    pub fn lo(&self) -> usize {
        self.footprint / 2
    }

    /// Largest legal centre coordinate.
    pub fn hi(&self) -> usize {
        self.size - 1 - self.footprint / 2
    }

    pub fn goal(&self) -> (usize, usize) {
        self.goal.unwrap_or((self.size / 2, self.size / 2))
    }

    pub fn obs_len(&self) -> usize {
        self.channels * self.size * self.size
    }

    fn clamp(&self, v: i64) -> usize {
        v.clamp(self.lo() as i64, self.hi() as i64) as usize
    }

    fn moved(&self, (x, y): (usize, usize), a: Action) -> (usize, usize) {
        let (dx, dy) = a.delta();
        let s = self.step_size as i64;
        (self.clamp(x as i64 + dx * s), self.clamp(y as i64 + dy * s))
    }
}

#[derive(Clone, Debug)]
pub struct EnvState {
    pub agent: (usize, usize),
    pub goal: (usize, usize),
    /// Background texture `[C, H, W]`; empty when the level has none.
    pub texture: Vec<f32>,
    pub decoy: Option<(usize, usize)>,
    pub step: usize,
    rng: Rng,
}

const ENV_STREAM: u64 = 0xD15;

fn draw_texture(cfg: &EnvConfig, rng: &mut Rng) -> Vec<f32> {
    (0..cfg.obs_len())
        .map(|_| cfg.amplitude * rng.gen::<f32>())
        .collect()
}

/// Starts an episode: agent placed uniformly, goal from the config.
pub fn env_reset(cfg: &EnvConfig, seed: u64) -> Result<EnvState> {
    cfg.validate()?;
    let mut rng = rng::stream(seed, ENV_STREAM);
    let span = cfg.lo()..=cfg.hi();
    let agent = (rng.gen_range(span.clone()), rng.gen_range(span.clone()));
    let texture = match cfg.level {
        DistractorLevel::None => Vec::new(),
        _ => draw_texture(cfg, &mut rng),
    };
    let decoy = (cfg.level == DistractorLevel::Hard)
        .then(|| (rng.gen_range(span.clone()), rng.gen_range(span.clone())));
    Ok(EnvState {
        agent,
        goal: cfg.goal(),
        texture,
        decoy,
        step: 0,
        rng,
    })
}

/// Advances one step and returns the reward of the move.
///
/// Distractor randomness is consumed identically for every action, so the
/// background never depends on what the agent does.
pub fn env_step(cfg: &EnvConfig, state: &mut EnvState, action: usize) -> Result<f32> {
    let action = Action::from_id(action)?;
    state.agent = cfg.moved(state.agent, action);
    state.step += 1;
    match cfg.level {
        DistractorLevel::None | DistractorLevel::Easy => {}
        DistractorLevel::Medium | DistractorLevel::Hard => {
            state.texture = draw_texture(cfg, &mut state.rng);
        }
    }
    if let Some(decoy) = state.decoy {
        let dir = Action::ALL[state.rng.gen_range(0..Action::COUNT)];
        let (dx, dy) = dir.delta();
        let s = cfg.decoy_step as i64;
        state.decoy = Some((
            cfg.clamp(decoy.0 as i64 + dx * s),
            cfg.clamp(decoy.1 as i64 + dy * s),
        ));
    }
    Ok(reward(cfg, state))
}

/// `-(Chebyshev distance to goal) / size`, in `[-1, 0]`.
pub fn reward(cfg: &EnvConfig, state: &EnvState) -> f32 {
    let dx = state.agent.0.abs_diff(state.goal.0);
    let dy = state.agent.1.abs_diff(state.goal.1);
    -(dx.max(dy) as f32) / cfg.size as f32
}

/// Observation `[C, H, W]` in `[0, 1]` and relevance map `[H, W]`.
///
/// `eval_mode` renders the clean observation space: no texture, no decoy.
pub fn render(cfg: &EnvConfig, state: &EnvState, eval_mode: bool) -> (Vec<f32>, Vec<bool>) {
    let (n, hw) = (cfg.size, cfg.size * cfg.size);
    let mut obs = if eval_mode || state.texture.is_empty() {
        vec![0.0; cfg.obs_len()]
    } else {
        state.texture.clone()
    };
    let paint = |obs: &mut [f32], (cx, cy): (usize, usize)| {
        let h = cfg.footprint / 2;
        for y in cy - h..=cy + h {
            for x in cx - h..=cx + h {
                for c in 0..cfg.channels {
                    obs[c * hw + y * n + x] = AGENT_COLOR[c.min(AGENT_COLOR.len() - 1)];
                }
            }
        }
    };
    if !eval_mode {
        if let Some(d) = state.decoy {
            paint(&mut obs, d);
        }
    }
    paint(&mut obs, state.agent);
    (obs, relevance_map(cfg, state.agent))
}

/// Agent footprint dilated by one pixel, clipped to the grid.
pub fn relevance_map(cfg: &EnvConfig, (cx, cy): (usize, usize)) -> Vec<bool> {
    let n = cfg.size;
    let r = cfg.footprint / 2 + 1;
    let mut rel = vec![false; n * n];
    for y in cy.saturating_sub(r)..=(cy + r).min(n - 1) {
        for x in cx.saturating_sub(r)..=(cx + r).min(n - 1) {
            rel[y * n + x] = true;
        }
    }
    rel
}

/// Greedy scripted policy: the move that strictly reduces Manhattan distance
/// to the goal, horizontal first; stay when none does.
pub fn expert_action(cfg: &EnvConfig, state: &EnvState) -> usize {
    let dist = |(x, y): (usize, usize)| x.abs_diff(state.goal.0) + y.abs_diff(state.goal.1);
    let here = dist(state.agent);
    let (dx, dy) = (
        state.goal.0 as i64 - state.agent.0 as i64,
        state.goal.1 as i64 - state.agent.1 as i64,
    );
    let horizontal = if dx > 0 { Action::Right } else { Action::Left };
    let vertical = if dy > 0 { Action::Down } else { Action::Up };
    for (delta, a) in [(dx, horizontal), (dy, vertical)] {
        if delta != 0 && dist(cfg.moved(state.agent, a)) < here {
            return a.id();
        }
    }
    Action::Stay.id()
}
