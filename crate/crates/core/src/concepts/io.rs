//! Line-oriented text form of a [`World`]. Floats are written in Rust's
//! shortest round-trip notation so a reload is bit-exact.

use std::fmt::Write as _;
use std::path::Path;

use super::{Affine, Gaussian, Mixture, Subject, World};
use crate::error::{Error, Result};

const HEADER: &str = "anchorlab-world v1";

fn floats(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ")
}

impl World {
    pub fn to_text(&self) -> String {
        let d = self.dim();
        let mut s = String::new();
        let _ = writeln!(s, "{HEADER}");
        let _ = writeln!(s, "seed {}", self.seed);
        let _ = writeln!(s, "dim {d}");
        let _ = writeln!(s, "classes {}", self.n_classes());
        let _ = writeln!(s, "contexts {}", self.n_contexts());
        for (k, class) in self.classes().iter().enumerate() {
            let _ = writeln!(s, "class {k} components {}", class.components().len());
            for (w, c) in class.weights().iter().zip(class.components()) {
                let _ = writeln!(s, "component {w:?} mean {} cov {}", floats(c.mean()), floats(c.cov()));
            }
        }
        for (j, a) in self.contexts().iter().enumerate() {
            let _ = writeln!(
                s,
                "context {j} matrix {} offset {}",
                floats(&a.matrix),
                floats(&a.offset)
            );
        }
        if let Ok(sub) = self.subject() {
            let _ = writeln!(
                s,
                "subject class {} component {} mean {} cov {}",
                sub.base_class,
                sub.component,
                floats(sub.distribution.mean()),
                floats(sub.distribution.cov())
            );
            for r in &sub.references {
                let _ = writeln!(s, "reference {}", floats(r));
            }
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|e| match e {
            Error::Parse { msg, .. } => Error::parse(path.display().to_string(), msg),
            other => other,
        })
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let err = |line: usize, m: &str| Error::parse("<world>", format!("line {}: {m}", line + 1));
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        match lines.next() {
            Some((_, l)) if l.trim() == HEADER => {}
            _ => return Err(err(0, "missing world header")),
        }
        let mut seed = None;
        let mut dim = None;
        let mut classes: Vec<Mixture> = Vec::new();
        let mut pending: Option<(usize, Vec<f64>, Vec<Gaussian>)> = None;
        let mut contexts = Vec::new();
        let mut subject: Option<Subject> = None;

        let flush =
            |pending: &mut Option<(usize, Vec<f64>, Vec<Gaussian>)>, classes: &mut Vec<Mixture>| -> Result<()> {
                if let Some((_, w, c)) = pending.take() {
                    classes.push(Mixture::new(w, c)?);
                }
                Ok(())
            };

        for (no, line) in lines {
            let toks: Vec<&str> = line.split_whitespace().collect();
            let d = dim.unwrap_or(0);
            let parse_f = |t: &str| t.parse::<f64>().map_err(|_| err(no, &format!("bad number `{t}`")));
            let parse_u = |t: &str| t.parse::<u64>().map_err(|_| err(no, &format!("bad integer `{t}`")));
            // `key v1 .. vn` slices, checked for length.
            let section = |key: &str, len: usize| -> Result<Vec<f64>> {
                let pos = toks
                    .iter()
                    .position(|t| *t == key)
                    .ok_or_else(|| err(no, &format!("missing `{key}`")))?;
                let vals = toks
                    .get(pos + 1..pos + 1 + len)
                    .ok_or_else(|| err(no, &format!("short `{key}`")))?;
                vals.iter().map(|t| parse_f(t)).collect()
            };
            match toks.first().copied() {
                Some("seed") => seed = Some(parse_u(toks.get(1).ok_or_else(|| err(no, "seed value"))?)?),
                Some("dim") => dim = Some(parse_u(toks.get(1).ok_or_else(|| err(no, "dim value"))?)? as usize),
                Some("classes") | Some("contexts") => {}
                Some("class") => {
                    flush(&mut pending, &mut classes)?;
                    let n = parse_u(toks.get(3).ok_or_else(|| err(no, "component count"))?)? as usize;
                    pending = Some((n, Vec::new(), Vec::new()));
                }
                Some("component") => {
                    let (_, w, c) = pending.as_mut().ok_or_else(|| err(no, "component outside class"))?;
                    w.push(parse_f(toks.get(1).ok_or_else(|| err(no, "weight"))?)?);
                    c.push(Gaussian::new(section("mean", d)?, section("cov", d * d)?)?);
                }
                Some("context") => {
                    flush(&mut pending, &mut classes)?;
                    contexts.push(Affine::new(section("matrix", d * d)?, section("offset", d)?)?);
                }
                Some("subject") => {
                    flush(&mut pending, &mut classes)?;
                    let k = parse_u(toks.get(2).ok_or_else(|| err(no, "subject class"))?)? as usize;
                    let c = parse_u(toks.get(4).ok_or_else(|| err(no, "subject component"))?)? as usize;
                    subject = Some(Subject {
                        base_class: k,
                        component: c,
                        distribution: Gaussian::new(section("mean", d)?, section("cov", d * d)?)?,
                        references: Vec::new(),
                    });
                }
                Some("reference") => {
                    let s = subject.as_mut().ok_or_else(|| err(no, "reference before subject"))?;
                    let r = toks[1..].iter().map(|t| parse_f(t)).collect::<Result<Vec<_>>>()?;
                    if r.len() != d {
                        return Err(err(no, "reference has wrong dimension"));
                    }
                    s.references.push(r);
                }
                Some(other) => return Err(err(no, &format!("unknown record `{other}`"))),
                None => {}
            }
        }
        flush(&mut pending, &mut classes)?;
        let seed = seed.ok_or_else(|| err(0, "missing seed"))?;
        World::from_parts(seed, classes, contexts, subject)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::concepts::WorldConfig;
    use crate::condition::Context;

    #[test]
    fn reload_reproduces_densities() {
        let w = World::build(&WorldConfig {
            seed: 12,
            ..WorldConfig::default()
        })
        .unwrap();
        let back = World::from_text(&w.to_text()).unwrap();
        assert_eq!(w, back);
        for c in w.all_contexts() {
            for k in 0..w.n_classes() {
                let x = [0.1 * k as f64, -0.3];
                let a = w.class_log_density(k, c, &x).unwrap();
                let b = back.class_log_density(k, c, &x).unwrap();
                assert!((a - b).abs() <= 1e-12);
            }
        }
        let _ = Context::Plain;
    }

    #[test]
    fn rejects_garbage() {
        assert!(World::from_text("not a world").is_err());
        assert!(World::from_text("anchorlab-world v1\nseed 1\ndim 2\nbogus 3\n").is_err());
    }
}
