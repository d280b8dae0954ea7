//! Shared vocabulary: device identity, transport, job identity and exact rationals.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use num_traits::{Signed, Zero};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Result, UpmError};

/// What kind of "general printer" a device is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DeviceClass {
    /// In-process sequential executor; the reference path every other class must match.
    Echo,
    /// Thread pool standing in for a multi-core accelerator.
    Multicore,
    /// Worker processes joined by a message-passing router.
    Cluster,
    /// Out-of-process plug-in speaking the frame protocol.
    External,
}

impl DeviceClass {
    pub fn as_str(self) -> &'static str {
        match self {
            DeviceClass::Echo => "ECHO",
            DeviceClass::Multicore => "MULTICORE",
            DeviceClass::Cluster => "CLUSTER",
            DeviceClass::External => "EXTERNAL",
        }
    }
}

impl fmt::Display for DeviceClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How the runtime reaches a device.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TransportSpec {
    Inproc,
    Spawn(SpawnSpec),
    Connect(ConnectSpec),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpawnSpec {
    pub command: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ranks: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConnectSpec {
    pub address: String,
}

/// One installed device. This is also the manifest schema (see the registry).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceDescriptor {
    pub name: String,
    pub class: DeviceClass,
    /// Identity of the resident code: a kernel, a kernel set, or `coupled-app`.
    pub model_id: String,
    #[serde(default)]
    pub languages: BTreeSet<String>,
    #[serde(default = "Rational::one")]
    pub speed_factor: Rational,
    pub transport: TransportSpec,
    #[serde(default)]
    pub params: BTreeMap<String, String>,
}

impl DeviceDescriptor {
    /// A descriptor with default speed, no languages and no params.
    pub fn new(
        name: impl Into<String>,
        class: DeviceClass,
        model_id: impl Into<String>,
        transport: TransportSpec,
    ) -> Self {
        DeviceDescriptor {
            name: name.into(),
            class,
            model_id: model_id.into(),
            languages: BTreeSet::new(),
            speed_factor: Rational::one(),
            transport,
            params: BTreeMap::new(),
        }
    }

    pub fn with_language(mut self, tag: impl Into<String>) -> Self {
        self.languages.insert(tag.into());
        self
    }

    pub fn with_param(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.params.insert(key.into(), value.into());
        self
    }

    pub fn with_speed(mut self, speed: Rational) -> Self {
        self.speed_factor = speed;
        self
    }

    /// Integer parameter lookup; malformed values are an invalid manifest.
    pub fn param_u64(&self, key: &str) -> Result<Option<u64>> {
        match self.params.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| UpmError::InvalidManifest(format!("params.{key}"))),
        }
    }
}

/// Installable names: `[a-z0-9_-]{1,64}`.
pub fn is_valid_device_name(name: &str) -> bool {
    (1..=64).contains(&name.len())
        && name
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_' || b == b'-')
}

/// Checks every descriptor invariant and reports the first rule broken as
/// `INVALID_MANIFEST(<rule>)`.
pub fn validate_descriptor(d: &DeviceDescriptor) -> Result<()> {
    let fail = |rule: &str| Err(UpmError::InvalidManifest(rule.to_string()));
    if !is_valid_device_name(&d.name) {
        return fail("name");
    }
    if d.model_id.is_empty() {
        return fail("model_id");
    }
    if !d.speed_factor.is_positive() {
        return fail("speed_factor");
    }
    match (d.class, &d.transport) {
        (DeviceClass::Echo | DeviceClass::Multicore, TransportSpec::Inproc) => {}
        (DeviceClass::Cluster, TransportSpec::Spawn(spawn)) => {
            if spawn.command.is_empty() || spawn.command[0].is_empty() {
                return fail("command");
            }
            if !matches!(spawn.ranks, Some(r) if r >= 1) {
                return fail("ranks");
            }
        }
        (DeviceClass::External, TransportSpec::Spawn(spawn)) => {
            if spawn.command.is_empty() || spawn.command[0].is_empty() {
                return fail("command");
            }
            if spawn.ranks.is_some() {
                return fail("ranks");
            }
        }
        (DeviceClass::External, TransportSpec::Connect(c)) => {
            if !is_host_port(&c.address) {
                return fail("address");
            }
        }
        _ => return fail("transport/class"),
    }
    Ok(())
}

fn is_host_port(address: &str) -> bool {
    match address.rsplit_once(':') {
        Some((host, port)) => !host.is_empty() && port.parse::<u16>().is_ok(),
        None => false,
    }
}

/// Per-handle job number, starting at 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct JobId(pub u64);

impl JobId {
    pub const FIRST: JobId = JobId(1);

    pub fn next(self) -> JobId {
        JobId(self.0 + 1)
    }
}

impl fmt::Display for JobId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Exact rational used for speed factors, job costs, loads and makespans.
///
/// Parses `"3"`, `"3/2"` and finite decimals such as `"0.25"`. In JSON it is
/// written as a number when integral and as a `"p/q"` string otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Rational(pub Ratio<i128>);

impl Rational {
    pub fn new(numer: i128, denom: i128) -> Self {
        Rational(Ratio::new(numer, denom))
    }

    pub fn from_integer(n: i128) -> Self {
        Rational(Ratio::from_integer(n))
    }

    pub fn one() -> Self {
        Rational::from_integer(1)
    }

    pub fn zero() -> Self {
        Rational::from_integer(0)
    }

    pub fn is_positive(&self) -> bool {
        self.0.is_positive()
    }

    pub fn numer(&self) -> i128 {
        *self.0.numer()
    }

    pub fn denom(&self) -> i128 {
        *self.0.denom()
    }

    /// Decimal rendering: exact when the expansion terminates, otherwise
    /// rounded half-up to six places. Trailing zeros are trimmed.
    pub fn to_decimal_string(&self) -> String {
        let negative = self.0.is_negative();
        let abs = self.0.abs();
        let (numer, denom) = (*abs.numer(), *abs.denom());
        let mut int_part = numer / denom;
        let mut rem = numer % denom;
        let mut digits = String::new();
        if rem != 0 && denom_terminates(denom) {
            while rem != 0 {
                rem *= 10;
                digits.push(char::from(b'0' + (rem / denom) as u8));
                rem %= denom;
            }
        } else if rem != 0 {
            let scaled = (rem * 2_000_000 + denom) / (2 * denom);
            if scaled == 1_000_000 {
                int_part += 1;
            } else {
                digits = format!("{scaled:06}");
                while digits.ends_with('0') {
                    digits.pop();
                }
            }
        }
        let sign = if negative && (int_part != 0 || !digits.is_empty()) { "-" } else { "" };
        if digits.is_empty() {
            format!("{sign}{int_part}")
        } else {
            format!("{sign}{int_part}.{digits}")
        }
    }
}

fn denom_terminates(mut d: i128) -> bool {
    while d % 2 == 0 {
        d /= 2;
    }
    while d % 5 == 0 {
        d /= 5;
    }
    d == 1
}

impl fmt::Display for Rational {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.denom() == 1 {
            write!(f, "{}", self.numer())
        } else {
            write!(f, "{}/{}", self.numer(), self.denom())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid rational {0:?}")]
pub struct ParseRationalError(String);

impl FromStr for Rational {
    type Err = ParseRationalError;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let err = || ParseRationalError(s.to_string());
        let s = s.trim();
        if let Some((p, q)) = s.split_once('/') {
            let p: i128 = p.trim().parse().map_err(|_| err())?;
            let q: i128 = q.trim().parse().map_err(|_| err())?;
            if q == 0 {
                return Err(err());
            }
            return Ok(Rational::new(p, q));
        }
        let (negative, body) = match s.strip_prefix('-') {
            Some(rest) => (true, rest),
            None => (false, s),
        };
        let (int_part, frac_part) = body.split_once('.').unwrap_or((body, ""));
        if int_part.is_empty() && frac_part.is_empty() {
            return Err(err());
        }
        let all_digits = |t: &str| t.bytes().all(|b| b.is_ascii_digit());
        if !all_digits(int_part) || !all_digits(frac_part) || frac_part.len() > 30 {
            return Err(err());
        }
        let digits = format!("{int_part}{frac_part}");
        let numer: i128 = if digits.is_empty() { 0 } else { digits.parse().map_err(|_| err())? };
        let denom = 10i128.pow(frac_part.len() as u32);
        let r = Rational::new(numer, denom);
        Ok(if negative { Rational(-r.0) } else { r })
    }
}

impl Serialize for Rational {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        if self.denom() == 1 {
            if let Ok(n) = i64::try_from(self.numer()) {
                return serializer.serialize_i64(n);
            }
        }
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Rational {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let value = serde_json::Value::deserialize(deserializer)?;
        let text = match &value {
            serde_json::Value::Number(n) => n.to_string(),
            serde_json::Value::String(s) => s.clone(),
            _ => return Err(serde::de::Error::custom("expected a number or \"p/q\" string")),
        };
        text.parse().map_err(serde::de::Error::custom)
    }
}

impl std::ops::Add for Rational {
    type Output = Rational;
    fn add(self, rhs: Rational) -> Rational {
        Rational(self.0 + rhs.0)
    }
}

impl std::ops::Mul for Rational {
    type Output = Rational;
    fn mul(self, rhs: Rational) -> Rational {
        Rational(self.0 * rhs.0)
    }
}

impl std::ops::Div for Rational {
    type Output = Rational;
    fn div(self, rhs: Rational) -> Rational {
        Rational(self.0 / rhs.0)
    }
}

impl std::iter::Sum for Rational {
    fn sum<I: Iterator<Item = Rational>>(iter: I) -> Rational {
        iter.fold(Rational::zero(), |a, b| a + b)
    }
}

impl Zero for Rational {
    fn zero() -> Self {
        Rational::zero()
    }
    fn is_zero(&self) -> bool {
        self.0.is_zero()
    }
}
