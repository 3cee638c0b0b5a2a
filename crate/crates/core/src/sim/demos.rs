use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::env::{EnvConfig, Env, Observation, Task};
use super::expert::ExpertPolicy;
use crate::error::{Error, Result};
use crate::rng::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub task_id: usize,
    pub seed: u64,
    /// One more entry than `actions`: the observation after the last step.
    pub observations: Vec<Observation>,
    pub actions: Vec<[f64; 3]>,
    pub success: bool,
    /// For analysis only.
    pub latent: f64,
}

impl EpisodeRecord {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Runs the expert for one full episode.
pub fn expert_rollout(task: Task, seed: u64, config: &EnvConfig) -> Result<EpisodeRecord> {
    let (mut env, obs) = Env::reset(task.id(), seed, config)?;
    let mut expert = ExpertPolicy::new();
    let mut observations = vec![obs];
    let mut actions = Vec::new();
    loop {
        let a = expert.act(&env.privileged());
        let out = env.step(a)?;
        actions.push(super::env::clamp_action(a));
        observations.push(out.obs);
        if out.done {
            return Ok(EpisodeRecord {
                task_id: task.id(),
                seed,
                observations,
                actions,
                success: out.success,
                latent: env.latent(),
            });
        }
    }
}

/// Seed of the `k`-th demonstration candidate. Its parity (and so its latent
/// class) alternates with `k`.
pub fn demo_seed(seed: u64, task: Task, k: u64) -> u64 {
    (derive_seed(seed, &format!("demo-{}", task.name()), k) & !1) | (k & 1)
}

/// `n` successful expert episodes plus the number of failed candidates that
/// were replaced.
pub fn generate_demos(task: Task, n: usize, seed: u64, config: &EnvConfig) -> Result<(Vec<EpisodeRecord>, usize)> {
    if n == 0 {
        return Err(Error::Invalid("demo count must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(n);
    let mut rejected = 0;
    let mut k = 0u64;
    while out.len() < n {
        let ep = expert_rollout(task, demo_seed(seed, task, k), config)?;
        k += 1;
        if ep.success {
            out.push(ep);
        } else {
            rejected += 1;
            if rejected > 10 * n {
                return Err(Error::Invalid(format!("expert keeps failing on {}", task.name())));
            }
        }
    }
    Ok((out, rejected))
}

/// JSON formatter writing every float with 17 significant digits.
struct SeventeenDigits;

impl serde_json::ser::Formatter for SeventeenDigits {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:.16e}")
    }
}

pub fn to_json_line<T: Serialize>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, SeventeenDigits);
    value.serialize(&mut ser)?;
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}

/// The JSON Lines text `write_episodes` produces.
pub fn episodes_jsonl(episodes: &[EpisodeRecord]) -> Result<String> {
    let mut out = String::new();
    for ep in episodes {
        out.push_str(&to_json_line(ep)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_episodes(path: &Path, episodes: &[EpisodeRecord]) -> Result<()> {
    std::fs::write(path, episodes_jsonl(episodes)?).map_err(|e| Error::io(path, e))
}

pub fn read_episodes(path: &Path) -> Result<Vec<EpisodeRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    if out.is_empty() {
        return Err(Error::Invalid(format!("{} holds no episodes", path.display())));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn demos_round_trip_exactly() {
        let (eps, rejected) = generate_demos(Task::BlindInsert, 6, 9, &EnvConfig::default()).unwrap();
        assert_eq!(rejected, 0);
        assert!(eps.iter().all(|e| e.success));
        assert_eq!(eps.iter().filter(|e| e.latent > 0.0).count(), 3);
        for e in &eps {
            assert_eq!(e.observations.len(), e.actions.len() + 1);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        write_episodes(&path, &eps).unwrap();
        assert_eq!(read_episodes(&path).unwrap(), eps);
    }

    #[test]
    fn floats_carry_seventeen_digits() {
        let s = to_json_line(&vec![0.1f64, -2.5, 1e-300]).unwrap();
        assert_eq!(s, "[1.0000000000000001e-1,-2.5000000000000000e0,1.0000000000000000e-300]");
        let back: Vec<f64> = serde_json::from_str(&s).unwrap();
        assert_eq!(back, vec![0.1, -2.5, 1e-300]);
    }

    #[test]
    fn unwritable_path_errors() {
        let err = write_episodes(Path::new("/nonexistent/dir/x.jsonl"), &[]).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
