//! Previous-action-conditioned pixel-wise Q approximator.
//!
//! One small fully convolutional network per primitive maps the observation
//! stacked with the previous-action context to a Q-map. Orientations are
//! handled by rotating the input so that the gripper axis lies along +x,
//! running the network, and rotating the output back. Gradients are derived
//! by hand; see [`conv`] for the layer kernels.

pub mod conv;
pub mod loss;
pub mod rotate;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridsim::{Action, Observation, Primitive, OBS_CHANNELS};
use crate::policy::QMapSet;
use crate::replay::Transition;
use crate::reward::RewardMap;
use conv::ConvShape;
pub use loss::robust_loss;
use rotate::Rotation;

/// Previous-action context channels, one per primitive.
pub const CONTEXT_CHANNELS: usize = 3;
/// Observation channels plus context channels.
pub const INPUT_CHANNELS: usize = OBS_CHANNELS + CONTEXT_CHANNELS;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkParams {
    pub hidden_channels: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Discount on the next step's reward.
    pub gamma: f64,
    pub batch_size: usize,
    /// Shape of the robust loss. 2 is the quadratic member; smaller values
    /// turn median-seeking and let the many near-zero neighbour targets win.
    pub loss_alpha: f64,
    /// Scale of the robust loss. With the quadratic shape the gradient grows as 1/c².
    pub loss_scale: f64,
    /// Start the output layer at zero so every Q-map is initially zero.
    pub zero_init_output: bool,
}

impl Default for NetworkParams {
    fn default() -> Self {
        NetworkParams {
            hidden_channels: 16,
            learning_rate: 1e-3,
            momentum: 0.9,
            gamma: 0.5,
            batch_size: 4,
            loss_alpha: 2.0,
            loss_scale: 0.1,
            zero_init_output: false,
        }
    }
}

impl NetworkParams {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_channels == 0 || self.batch_size == 0 {
            return Err(Error::config(
                "network.hidden_channels and network.batch_size must be positive",
            ));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(
                "network.learning_rate must be positive and network.momentum in [0, 1)",
            ));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::config("network.gamma must be in [0, 1]"));
        }
        if !(self.loss_scale > 0.0) || !self.loss_alpha.is_finite() {
            return Err(Error::config(
                "network.loss_scale must be positive and network.loss_alpha finite",
            ));
        }
        Ok(())
    }
}

/// Sparse encoding of the previous action: its Q prediction at its pose, in its
/// primitive's channel. All zero at the start of an episode.
#[derive(Clone, Debug, PartialEq)]
pub struct PrevActionContext {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl PrevActionContext {
    pub fn zeros(height: usize, width: usize) -> Self {
        PrevActionContext {
            height,
            width,
            data: vec![0.0; CONTEXT_CHANNELS * height * width],
        }
    }

    pub fn from_action(action: &Action, height: usize, width: usize) -> Self {
        let mut ctx = Self::zeros(height, width);
        let c = action.primitive.index();
        ctx.data[(c * height + action.y) * width + action.x] = action.q_value;
        ctx
    }

    pub fn nonzero_count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }
}

/// Discounted target with the reward propagation gate: the next reward only
/// flows back through steps that earned a positive reward themselves.
pub fn compute_target(r_t: f64, r_next: f64, gamma: f64) -> f64 {
    let eta = if r_t > 0.0 { 1.0 } else { 0.0 };
    r_t + eta * gamma * r_next
}

/// Per-pixel regression targets for one transition.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainTarget {
    pub y: f64,
    pub targets: Vec<f64>,
    pub supervised: Vec<bool>,
}

impl TrainTarget {
    /// Scales the reward map so that the executed pixel carries `y`.
    pub fn new(map: &RewardMap, x: usize, y_pix: usize, y: f64) -> Self {
        let peak = map.at(x, y_pix);
        let targets = map
            .grid
            .iter()
            .zip(&map.supervised)
            .map(|(&v, &s)| if s && peak != 0.0 { y * v / peak } else { 0.0 })
            .collect();
        TrainTarget {
            y,
            targets,
            supervised: map.supervised.clone(),
        }
    }
}

/// Parameters of one primitive's conv stack, stored flat:
/// conv1 weight, conv1 bias, conv2 weight, conv2 bias, conv3 weight, conv3 bias.
#[derive(Clone, Debug, PartialEq)]
pub struct PrimitiveNet {
    pub layers: [ConvShape; 3],
    pub params: Vec<f64>,
}

struct ForwardCache {
    h: usize,
    w: usize,
    input: Vec<f64>,
    act1: Vec<f64>,
    act2: Vec<f64>,
    out: Vec<f64>,
}

impl PrimitiveNet {
    fn shapes(in_channels: usize, hidden: usize) -> [ConvShape; 3] {
        [
            ConvShape { in_channels, out_channels: hidden, kernel: 3 },
            ConvShape { in_channels: hidden, out_channels: hidden, kernel: 3 },
            ConvShape { in_channels: hidden, out_channels: 1, kernel: 1 },
        ]
    }

    fn init<R: Rng>(in_channels: usize, hidden: usize, zero_output: bool, rng: &mut R) -> Self {
        let layers = Self::shapes(in_channels, hidden);
        let mut params = Vec::new();
        for (li, shape) in layers.iter().enumerate() {
            let bound = 1.0 / (shape.fan_in() as f64).sqrt();
            for _ in 0..shape.param_len() {
                let v = rng.gen_range(-bound..bound);
                params.push(if zero_output && li == 2 { 0.0 } else { v });
            }
        }
        PrimitiveNet { layers, params }
    }

    fn offsets(&self) -> [usize; 4] {
        let mut o = [0; 4];
        for i in 0..3 {
            o[i + 1] = o[i] + self.layers[i].param_len();
        }
        o
    }

    /// `(name, dims, values)` for each weight and bias array, in storage order.
    pub fn arrays(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let o = self.offsets();
        let mut out = Vec::new();
        for (i, s) in self.layers.iter().enumerate() {
            let block = &self.params[o[i]..o[i + 1]];
            let (w, b) = block.split_at(s.weight_len());
            out.push((
                format!("conv{}.weight", i + 1),
                vec![s.out_channels, s.in_channels, s.kernel, s.kernel],
                w,
            ));
            out.push((format!("conv{}.bias", i + 1), vec![s.out_channels], b));
        }
        out
    }

    fn forward_cached(&self, input: Vec<f64>, h: usize, w: usize) -> ForwardCache {
        let o = self.offsets();
        let p = |i: usize| &self.params[o[i]..o[i + 1]];
        let mut act1 = conv::forward(&self.layers[0], p(0), &input, h, w);
        act1.iter_mut().for_each(|v| *v = v.max(0.0));
        let mut act2 = conv::forward(&self.layers[1], p(1), &act1, h, w);
        act2.iter_mut().for_each(|v| *v = v.max(0.0));
        let out = conv::forward(&self.layers[2], p(2), &act2, h, w);
        ForwardCache { h, w, input, act1, act2, out }
    }

    fn backward(&self, cache: &ForwardCache, grad_out: &[f64], grads: &mut [f64]) {
        let o = self.offsets();
        let (h, w) = (cache.h, cache.w);
        let p = |i: usize| &self.params[o[i]..o[i + 1]];
        let (g01, g2) = grads.split_at_mut(o[2]);
        let (g0, g1) = g01.split_at_mut(o[1]);
        let mut d2 = conv::backward(&self.layers[2], p(2), &cache.act2, grad_out, h, w, g2, true)
            .expect("input gradient requested");
        for (g, a) in d2.iter_mut().zip(&cache.act2) {
            if *a <= 0.0 {
                *g = 0.0;
            }
        }
        let mut d1 = conv::backward(&self.layers[1], p(1), &cache.act1, &d2, h, w, g1, true)
            .expect("input gradient requested");
        for (g, a) in d1.iter_mut().zip(&cache.act1) {
            if *a <= 0.0 {
                *g = 0.0;
            }
        }
        conv::backward(&self.layers[0], p(0), &cache.input, &d1, h, w, g0, false);
    }
}

/// Three per-primitive networks sharing input geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct QNetwork {
    pub rotations: usize,
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub hidden_channels: usize,
    nets: [PrimitiveNet; 3],
}

impl QNetwork {
    pub fn new(rotations: usize, height: usize, width: usize, params: &NetworkParams, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hidden = params.hidden_channels;
        let zero = params.zero_init_output;
        let nets = [
            PrimitiveNet::init(INPUT_CHANNELS, hidden, zero, &mut rng),
            PrimitiveNet::init(INPUT_CHANNELS, hidden, zero, &mut rng),
            PrimitiveNet::init(INPUT_CHANNELS, hidden, zero, &mut rng),
        ];
        QNetwork {
            rotations,
            height,
            width,
            in_channels: INPUT_CHANNELS,
            hidden_channels: hidden,
            nets,
        }
    }

    /// Rebuilds a network from raw parameter vectors, checking lengths.
    pub fn from_parts(
        rotations: usize,
        height: usize,
        width: usize,
        in_channels: usize,
        hidden_channels: usize,
        params: [Vec<f64>; 3],
    ) -> Result<Self> {
        let layers = PrimitiveNet::shapes(in_channels, hidden_channels);
        let expected: usize = layers.iter().map(ConvShape::param_len).sum();
        let [a, b, c] = params;
        let mut nets = Vec::with_capacity(3);
        for p in [a, b, c] {
            if p.len() != expected {
                return Err(Error::Shape {
                    expected: format!("{expected} parameters"),
                    actual: format!("{}", p.len()),
                });
            }
            nets.push(PrimitiveNet { layers, params: p });
        }
        let nets: [PrimitiveNet; 3] = nets.try_into().expect("three networks");
        Ok(QNetwork {
            rotations,
            height,
            width,
            in_channels,
            hidden_channels,
            nets,
        })
    }

    pub fn net(&self, p: Primitive) -> &PrimitiveNet {
        &self.nets[p.index()]
    }

    pub fn params(&self, p: Primitive) -> &[f64] {
        &self.nets[p.index()].params
    }

    pub fn params_mut(&mut self, p: Primitive) -> &mut [f64] {
        &mut self.nets[p.index()].params
    }

    pub fn param_count(&self) -> usize {
        self.nets.iter().map(|n| n.params.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.nets.iter().all(|n| n.params.iter().all(|v| v.is_finite()))
    }

    fn check_inputs(&self, obs: &Observation, ctx: &PrevActionContext) -> Result<()> {
        if obs.height != self.height || obs.width != self.width {
            return Err(Error::Shape {
                expected: format!("{}x{} observation", self.height, self.width),
                actual: format!("{}x{}", obs.height, obs.width),
            });
        }
        if ctx.height != self.height || ctx.width != self.width {
            return Err(Error::Shape {
                expected: format!("{}x{} context", self.height, self.width),
                actual: format!("{}x{}", ctx.height, ctx.width),
            });
        }
        Ok(())
    }

    fn stacked_input(obs: &Observation, ctx: &PrevActionContext) -> Vec<f64> {
        let mut input = Vec::with_capacity(obs.data.len() + ctx.data.len());
        input.extend_from_slice(&obs.data);
        input.extend_from_slice(&ctx.data);
        input
    }

    fn run_rotation(&self, primitive: Primitive, input: &[f64], rotation: &Rotation) -> (ForwardCache, Vec<f64>) {
        let net_input = rotation.into_net(self.in_channels, input);
        let cache = self.nets[primitive.index()].forward_cached(
            net_input,
            rotation.net_height,
            rotation.net_width,
        );
        let out = rotation.out_of_net(&cache.out);
        (cache, out)
    }

    /// `R × h × w` Q-values for one primitive.
    pub fn forward(&self, obs: &Observation, ctx: &PrevActionContext, primitive: Primitive) -> Result<Vec<f64>> {
        self.check_inputs(obs, ctx)?;
        let input = Self::stacked_input(obs, ctx);
        let mut maps = Vec::with_capacity(self.rotations * self.height * self.width);
        for r in 0..self.rotations {
            let rotation = Rotation::new(self.height, self.width, r, self.rotations);
            let (_, out) = self.run_rotation(primitive, &input, &rotation);
            maps.extend(out);
        }
        Ok(maps)
    }

    /// Q-maps for every listed primitive.
    pub fn forward_all(&self, obs: &Observation, ctx: &PrevActionContext, primitives: &[Primitive]) -> Result<QMapSet> {
        let mut set = QMapSet::new(self.rotations, self.height, self.width);
        for &p in primitives {
            set.insert(p, self.forward(obs, ctx, p)?)?;
        }
        Ok(set)
    }

    /// ReLU on/off pattern for the executed primitive and orientation of a transition.
    pub fn activation_pattern(&self, t: &Transition) -> Vec<bool> {
        let input = Self::stacked_input(&t.observation, &t.context);
        let rotation = Rotation::new(self.height, self.width, t.action.theta_index, self.rotations);
        let (cache, _) = self.run_rotation(t.action.primitive, &input, &rotation);
        cache
            .act1
            .iter()
            .chain(&cache.act2)
            .map(|&v| v > 0.0)
            .collect()
    }

    /// Batch loss, per-transition losses and per-primitive parameter gradients.
    /// Primitives absent from the batch get `None`.
    pub fn loss_and_gradient(
        &self,
        batch: &[&Transition],
        params: &NetworkParams,
    ) -> Result<(f64, Vec<f64>, [Option<Vec<f64>>; 3])> {
        if batch.is_empty() {
            return Err(Error::contract("training batch is empty"));
        }
        let scale = 1.0 / batch.len() as f64;
        let mut grads: [Option<Vec<f64>>; 3] = [None, None, None];
        let mut losses = Vec::with_capacity(batch.len());
        for t in batch {
            self.check_inputs(&t.observation, &t.context)?;
            let r_next = t.next_reward.ok_or_else(|| {
                Error::contract("pending transition reached the trainer")
            })?;
            let y = compute_target(t.reward, r_next, params.gamma);
            let target = TrainTarget::new(&t.reward_map, t.action.x, t.action.y, y);
            let n_sup = target.supervised.iter().filter(|&&s| s).count();
            if n_sup == 0 {
                return Err(Error::contract("transition has no supervised pixels"));
            }

            let p = t.action.primitive;
            let input = Self::stacked_input(&t.observation, &t.context);
            let rotation = Rotation::new(self.height, self.width, t.action.theta_index, self.rotations);
            let (cache, out) = self.run_rotation(p, &input, &rotation);

            let mut loss = 0.0;
            let mut grad_net = vec![0.0; cache.out.len()];
            for (i, &sup) in target.supervised.iter().enumerate() {
                if !sup {
                    continue;
                }
                let (l, d) = robust_loss(out[i] - target.targets[i], params.loss_alpha, params.loss_scale);
                loss += l;
                if let Some(q) = rotation.from_net[i] {
                    grad_net[q] += d * scale / n_sup as f64;
                }
            }
            losses.push(loss / n_sup as f64);

            let net = &self.nets[p.index()];
            let g = grads[p.index()].get_or_insert_with(|| vec![0.0; net.params.len()]);
            net.backward(&cache, &grad_net, g);
        }
        let mean = losses.iter().sum::<f64>() * scale;
        Ok((mean, losses, grads))
    }
}

/// SGD with momentum. Networks without gradient in a batch are left untouched,
/// including their momentum buffers.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub params: NetworkParams,
    velocity: [Option<Vec<f64>>; 3],
    pub steps: usize,
}

/// Result of one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchLoss {
    pub mean: f64,
    pub per_item: Vec<f64>,
}

impl Trainer {
    pub fn new(params: NetworkParams) -> Self {
        Trainer {
            params,
            velocity: [None, None, None],
            steps: 0,
        }
    }

    pub fn train_step(&mut self, net: &mut QNetwork, batch: &[&Transition]) -> Result<BatchLoss> {
        let (mean, per_item, grads) = net.loss_and_gradient(batch, &self.params)?;
        if !mean.is_finite() {
            return Err(Error::Divergence {
                step: self.steps,
                detail: format!("batch loss {mean}"),
            });
        }
        let (lr, mu) = (self.params.learning_rate, self.params.momentum);
        for (i, grad) in grads.into_iter().enumerate() {
            let Some(grad) = grad else { continue };
            let v = self.velocity[i].get_or_insert_with(|| vec![0.0; grad.len()]);
            let params = &mut net.nets[i].params;
            for ((p, v), g) in params.iter_mut().zip(v.iter_mut()).zip(&grad) {
                *v = mu * *v + g;
                *p -= lr * *v;
            }
        }
        if !net.all_finite() {
            return Err(Error::Divergence {
                step: self.steps,
                detail: "non-finite parameter after update".into(),
            });
        }
        self.steps += 1;
        Ok(BatchLoss { mean, per_item })
    }
}
