//! Binary checkpoints of a [`SacState`].
//!
//! Little-endian layout:
//!
//! ```text
//! [magic "EFNS"][u16 version = 1][u32 section count]
//! section := [u16 name length][name bytes][u8 kind][payload]
//!   kind 0 net   : [u8 output activation][u32 layer count][u32 sizes...][u32 n][f64 x n]
//!   kind 1 reals : [u32 n][f64 x n]
//!   kind 2 ints  : [u32 n][u64 x n]
//!   kind 3 adam  : [f64 lr][u64 t][u32 n][f64 m x n][f64 v x n]
//!   kind 4 bytes : [u32 n][u8 x n]
//! ```
//!
//! Sections may appear in any order; every expected name must be present
//! exactly once.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::nn::{Activation, Mlp};
use super::optim::Adam;
use super::{Actor, SacConfig, SacState};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"EFNS";
pub const VERSION: u16 = 1;

const NETS: [&str; 7] = ["encoder", "target_encoder", "critic1", "critic2", "target1", "target2", "actor"];

enum Section {
    Net(Mlp),
    Reals(Vec<f64>),
    Ints(Vec<u64>),
    Adam(Adam),
    Bytes(Vec<u8>),
}

struct Writer {
    out: Vec<u8>,
    count: u32,
}

impl Writer {
    fn header(&mut self, name: &str, kind: u8) {
        self.count += 1;
        self.out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        self.out.extend_from_slice(name.as_bytes());
        self.out.push(kind);
    }

    fn u32(&mut self, v: usize) {
        self.out.extend_from_slice(&(v as u32).to_le_bytes());
    }

    fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.out.extend_from_slice(&x.to_le_bytes());
        }
    }

    fn net(&mut self, name: &str, net: &Mlp) {
        self.header(name, 0);
        self.out.push(net.output_activation().code());
        self.u32(net.sizes().len());
        for &s in net.sizes() {
            self.u32(s);
        }
        self.u32(net.num_params());
        self.f64s(net.params());
    }

    fn reals(&mut self, name: &str, v: &[f64]) {
        self.header(name, 1);
        self.u32(v.len());
        self.f64s(v);
    }

    fn ints(&mut self, name: &str, v: &[u64]) {
        self.header(name, 2);
        self.u32(v.len());
        for x in v {
            self.out.extend_from_slice(&x.to_le_bytes());
        }
    }

    fn adam(&mut self, name: &str, a: &Adam) {
        self.header(name, 3);
        self.f64s(&[a.lr]);
        self.out.extend_from_slice(&a.steps().to_le_bytes());
        let (m, v) = a.moments();
        self.u32(m.len());
        self.f64s(m);
        self.f64s(v);
    }

    fn bytes(&mut self, name: &str, b: &[u8]) {
        self.header(name, 4);
        self.u32(b.len());
        self.out.extend_from_slice(b);
    }
}

pub fn to_bytes(s: &SacState) -> Vec<u8> {
    let mut w = Writer { out: Vec::new(), count: 0 };
    let c = &s.cfg;
    w.reals(
        "config.reals",
        &[c.gamma, c.polyak_tau, c.lr_actor, c.lr_critic, c.lr_alpha, c.target_entropy, c.init_alpha, c.r_max, c.action_scale],
    );
    let mut ints = vec![c.batch_size as u64, c.replay_capacity as u64, c.residual_dim as u64, c.encoder_dim as u64, c.seed];
    ints.extend(c.hidden_dims.iter().map(|&h| h as u64));
    w.ints("config.ints", &ints);
    let nets = [&s.encoder, &s.target_encoder, &s.critic1, &s.critic2, &s.target1, &s.target2, s.actor.net()];
    for (name, net) in NETS.iter().zip(nets) {
        w.net(name, net);
    }
    w.reals("log_alpha", &[s.log_alpha]);
    w.ints("step", &[s.step]);
    w.adam("adam.encoder", &s.opt_encoder);
    w.adam("adam.critic1", &s.opt_critic1);
    w.adam("adam.critic2", &s.opt_critic2);
    w.adam("adam.actor", &s.opt_actor);
    w.adam("adam.alpha", &s.opt_alpha);
    let mut rng = Vec::with_capacity(56);
    rng.extend_from_slice(&s.rng.get_seed());
    rng.extend_from_slice(&s.rng.get_stream().to_le_bytes());
    rng.extend_from_slice(&s.rng.get_word_pos().to_le_bytes());
    w.bytes("rng", &rng);

    let mut out = Vec::with_capacity(w.out.len() + 10);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&w.count.to_le_bytes());
    out.extend_from_slice(&w.out);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated { offset: self.buf.len() });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = n.checked_mul(8).ok_or_else(|| Error::Format("length overflows".into()))?;
        Ok(self
            .take(bytes)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn section(&mut self) -> Result<(String, Section)> {
        let name_len = self.u16()? as usize;
        let name = std::str::from_utf8(self.take(name_len)?)
            .map_err(|_| Error::Format("section name is not UTF-8".into()))?
            .to_string();
        let kind = self.u8()?;
        let sec = match kind {
            0 => {
                let act = Activation::from_code(self.u8()?)?;
                let layers = self.len()?;
                let sizes = (0..layers).map(|_| self.len()).collect::<Result<Vec<_>>>()?;
                let n = self.len()?;
                let params = self.f64s(n)?;
                Section::Net(Mlp::from_params(&sizes, act, params).map_err(|e| Error::Format(format!("section {name}: {e}")))?)
            }
            1 => {
                let n = self.len()?;
                Section::Reals(self.f64s(n)?)
            }
            2 => {
                let n = self.len()?;
                Section::Ints((0..n).map(|_| self.u64()).collect::<Result<_>>()?)
            }
            3 => {
                let lr = self.f64s(1)?[0];
                let t = self.u64()?;
                let n = self.len()?;
                let m = self.f64s(n)?;
                let v = self.f64s(n)?;
                Section::Adam(Adam::from_state(lr, m, v, t)?)
            }
            4 => {
                let n = self.len()?;
                Section::Bytes(self.take(n)?.to_vec())
            }
            k => return Err(Error::Format(format!("section {name}: unknown kind {k}"))),
        };
        Ok((name, sec))
    }
}

struct Sections(HashMap<String, Section>);

impl Sections {
    fn take(&mut self, name: &str) -> Result<Section> {
        self.0.remove(name).ok_or_else(|| Error::Format(format!("missing section {name}")))
    }

    fn net(&mut self, name: &str) -> Result<Mlp> {
        match self.take(name)? {
            Section::Net(n) => Ok(n),
            _ => Err(Error::Format(format!("section {name} is not a network"))),
        }
    }

    fn reals(&mut self, name: &str, n: usize) -> Result<Vec<f64>> {
        match self.take(name)? {
            Section::Reals(v) if v.len() == n => Ok(v),
            _ => Err(Error::Format(format!("section {name} must hold {n} reals"))),
        }
    }

    fn ints(&mut self, name: &str) -> Result<Vec<u64>> {
        match self.take(name)? {
            Section::Ints(v) => Ok(v),
            _ => Err(Error::Format(format!("section {name} is not an integer list"))),
        }
    }

    fn adam(&mut self, name: &str, n: usize) -> Result<Adam> {
        match self.take(name)? {
            Section::Adam(a) if a.len() == n => Ok(a),
            _ => Err(Error::Format(format!("section {name} must hold optimizer state for {n} parameters"))),
        }
    }

    fn bytes(&mut self, name: &str) -> Result<Vec<u8>> {
        match self.take(name)? {
            Section::Bytes(b) => Ok(b),
            _ => Err(Error::Format(format!("section {name} is not a byte blob"))),
        }
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<SacState> {
    let mut rd = Reader { buf: bytes, pos: 0 };
    let magic = rd.take(4)?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:02x?}")));
    }
    let version = rd.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = rd.len()?;
    let mut map = HashMap::new();
    for _ in 0..count {
        let (name, sec) = rd.section()?;
        if map.insert(name.clone(), sec).is_some() {
            return Err(Error::Format(format!("section {name} appears twice")));
        }
    }
    if rd.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - rd.pos)));
    }
    let mut secs = Sections(map);

    let r = secs.reals("config.reals", 9)?;
    let ints = secs.ints("config.ints")?;
    if ints.len() < 5 {
        return Err(Error::Format("config.ints too short".into()));
    }
    let cfg = SacConfig {
        gamma: r[0],
        polyak_tau: r[1],
        lr_actor: r[2],
        lr_critic: r[3],
        lr_alpha: r[4],
        target_entropy: r[5],
        init_alpha: r[6],
        r_max: r[7],
        action_scale: r[8],
        batch_size: ints[0] as usize,
        replay_capacity: ints[1] as usize,
        residual_dim: ints[2] as usize,
        encoder_dim: ints[3] as usize,
        seed: ints[4],
        hidden_dims: ints[5..].iter().map(|&h| h as usize).collect(),
    };
    let mut nets = NETS.iter().map(|n| secs.net(n)).collect::<Result<Vec<_>>>()?.into_iter();
    let mut next = || nets.next().unwrap();
    let (encoder, target_encoder, critic1, critic2, target1, target2) = (next(), next(), next(), next(), next(), next());
    let actor = Actor::from_net(next(), cfg.r_max)?;
    let log_alpha = secs.reals("log_alpha", 1)?[0];
    let step = match secs.ints("step")?.as_slice() {
        [s] => *s,
        _ => return Err(Error::Format("step section must hold one integer".into())),
    };
    let opt_encoder = secs.adam("adam.encoder", encoder.num_params())?;
    let opt_critic1 = secs.adam("adam.critic1", critic1.num_params())?;
    let opt_critic2 = secs.adam("adam.critic2", critic2.num_params())?;
    let opt_actor = secs.adam("adam.actor", actor.net().num_params())?;
    let opt_alpha = secs.adam("adam.alpha", 1)?;
    let rng_bytes = secs.bytes("rng")?;
    if rng_bytes.len() != 56 {
        return Err(Error::Format("rng section must hold 56 bytes".into()));
    }
    let mut rng = ChaCha8Rng::from_seed(rng_bytes[..32].try_into().unwrap());
    rng.set_stream(u64::from_le_bytes(rng_bytes[32..40].try_into().unwrap()));
    rng.set_word_pos(u128::from_le_bytes(rng_bytes[40..56].try_into().unwrap()));
    if let Some(extra) = secs.0.keys().next() {
        return Err(Error::Format(format!("unexpected section {extra}")));
    }
    cfg.validate().map_err(|e| Error::Format(format!("stored config invalid: {e}")))?;
    let shapes_ok = encoder.sizes() == target_encoder.sizes()
        && critic1.sizes() == critic2.sizes()
        && critic1.sizes() == target1.sizes()
        && critic1.sizes() == target2.sizes()
        && encoder.output_dim() == cfg.encoder_dim
        && critic1.input_dim() == cfg.encoder_dim + cfg.residual_dim
        && actor.net().input_dim() == cfg.encoder_dim
        && actor.residual_dim() == cfg.residual_dim;
    if !shapes_ok {
        return Err(Error::Format("network shapes disagree with the stored config".into()));
    }
    Ok(SacState {
        cfg,
        encoder,
        target_encoder,
        critic1,
        critic2,
        target1,
        target2,
        actor,
        log_alpha,
        step,
        opt_encoder,
        opt_critic1,
        opt_critic2,
        opt_actor,
        opt_alpha,
        rng,
    })
}

pub fn save(s: &SacState, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(s))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<SacState> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::super::ReplayTransition;
    use super::*;

    fn trained() -> SacState {
        let cfg = SacConfig { hidden_dims: vec![5, 3], encoder_dim: 4, seed: 12, ..SacConfig::default() };
        let mut s = SacState::new(cfg, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch: Vec<ReplayTransition> = (0..8)
            .map(|_| ReplayTransition {
                context: (0..6).map(|_| rng.random_range(-1.0..1.0)).collect(),
                next_context: (0..6).map(|_| rng.random_range(-1.0..1.0)).collect(),
                residual: vec![0.05, -0.1],
                base_action: vec![0.01, 0.02],
                next_base_action: vec![0.0, 0.03],
                reward: rng.random(),
                done: false,
            })
            .collect();
        for _ in 0..3 {
            s.update(&batch).unwrap();
        }
        s
    }

    #[test]
    fn round_trip_is_exact() {
        let s = trained();
        let bytes = to_bytes(&s);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn resumed_state_continues_identically() {
        let mut a = trained();
        let mut b = from_bytes(&to_bytes(&a)).unwrap();
        let x = vec![0.1; 6];
        assert_eq!(a.act(&x, false).unwrap(), b.act(&x, false).unwrap());
    }

    #[test]
    fn corrupt_headers() {
        let bytes = to_bytes(&trained());
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(from_bytes(&bad), Err(Error::Format(_))));
        let mut ver = bytes.clone();
        ver[4] = 2;
        assert!(matches!(from_bytes(&ver), Err(Error::Format(_))));
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Truncated { .. })));
        assert!(matches!(from_bytes(&bytes[..3]), Err(Error::Truncated { offset: 3 })));
    }
}
