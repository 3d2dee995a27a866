//! Flat `key = value` configuration files: one pair per line, `#` comments,
//! unknown keys rejected by name.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::objective::Schedule;

pub struct KvFile {
    pairs: BTreeMap<String, String>,
}

impl KvFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected `key = value`, got `{raw}`",
                    lineno + 1
                )));
            };
            let key = k.trim().to_string();
            if pairs.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("duplicate key `{key}`")));
            }
        }
        Ok(KvFile { pairs })
    }

    pub fn take_raw(&mut self, key: &str) -> Option<String> {
        self.pairs.remove(key)
    }

    pub fn take<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.pairs.remove(key) {
            None => Ok(None),
            Some(v) => v
                .parse::<T>()
                .map(Some)
                .map_err(|_| Error::Config(format!("key `{key}`: cannot parse `{v}`"))),
        }
    }

    pub fn take_bool(&mut self, key: &str) -> Result<Option<bool>> {
        match self.pairs.remove(key) {
            None => Ok(None),
            Some(v) => match v.as_str() {
                "true" | "1" | "yes" => Ok(Some(true)),
                "false" | "0" | "no" => Ok(Some(false)),
                other => Err(Error::Config(format!("key `{key}`: expected bool, got `{other}`"))),
            },
        }
    }

    /// `v` for a constant or `a->b@p->q` for an annealed value.
    pub fn take_schedule(&mut self, key: &str) -> Result<Option<Schedule>> {
        match self.pairs.remove(key) {
            None => Ok(None),
            Some(v) => parse_schedule(&v)
                .map(Some)
                .map_err(|e| Error::Config(format!("key `{key}`: {e}"))),
        }
    }

    /// Error on any key nobody consumed.
    pub fn finish(self) -> Result<()> {
        if let Some(key) = self.pairs.keys().next() {
            return Err(Error::Config(format!("unknown key `{key}`")));
        }
        Ok(())
    }
}

pub fn parse_schedule(v: &str) -> Result<Schedule> {
    if let Some((vals, steps)) = v.split_once('@') {
        let (a, b) = vals
            .split_once("->")
            .ok_or_else(|| Error::Config(format!("expected `a->b@p->q`, got `{v}`")))?;
        let (p, q) = steps
            .split_once("->")
            .ok_or_else(|| Error::Config(format!("expected `a->b@p->q`, got `{v}`")))?;
        let parse_f = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad number `{s}` in schedule `{v}`")))
        };
        let parse_u = |s: &str| {
            s.trim()
                .parse::<u64>()
                .map_err(|_| Error::Config(format!("bad step `{s}` in schedule `{v}`")))
        };
        Schedule::new(parse_f(a)?, parse_f(b)?, parse_u(p)?, parse_u(q)?)
    } else {
        let c = v
            .trim()
            .parse::<f64>()
            .map_err(|_| Error::Config(format!("bad number `{v}`")))?;
        Ok(Schedule::constant(c))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_pairs_comments_and_rejects_unknown() {
        let mut kv = KvFile::parse("a = 3 # three\n# full comment\nb = hello\n").unwrap();
        assert_eq!(kv.take::<i32>("a").unwrap(), Some(3));
        assert_eq!(kv.take_raw("b").as_deref(), Some("hello"));
        kv.finish().unwrap();

        let kv2 = KvFile::parse("mystery = 1\n").unwrap();
        let err = kv2.finish().unwrap_err();
        assert!(err.to_string().contains("mystery"));
    }

    #[test]
    fn schedule_forms() {
        let s = parse_schedule("0.5").unwrap();
        assert_eq!(s.value(100), 0.5);
        let s = parse_schedule("0.1->0.01@4000->10000").unwrap();
        assert_eq!(s.value(0), 0.1);
        assert_eq!(s.value(10_000), 0.01);
        assert!(parse_schedule("1->2").is_err());
        assert!(parse_schedule("x").is_err());
    }

    #[test]
    fn malformed_lines_are_rejected() {
        assert!(KvFile::parse("just words\n").is_err());
        assert!(KvFile::parse("a = 1\na = 2\n").is_err());
    }
}
