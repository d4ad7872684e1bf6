//! Compositional lookup tables over 3-bit strings.

use serde::{Deserialize, Serialize};

use crate::autodiff::RngStream;
use crate::error::{Error, Result};

pub const TABLE_COUNT: usize = 8;

pub fn bits(v: u8) -> String {
    format!("{v:03b}")
}

pub fn parse_bits(s: &str) -> Result<u8> {
    if s.len() != 3 || !s.bytes().all(|b| b == b'0' || b == b'1') {
        return Err(Error::Task(format!("{s:?} is not a 3-bit string")));
    }
    u8::from_str_radix(s, 2).map_err(|e| Error::Task(e.to_string()))
}

/// One named bijection; `map[v]` is the image of value `v`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LookupTable {
    pub name: String,
    pub map: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<LookupTable>", into = "Vec<LookupTable>")]
pub struct LookupTableSet {
    names: Vec<String>,
    maps: Vec<[u8; 8]>,
}

impl LookupTableSet {
    /// Tables named t1..tN from explicit permutations.
    pub fn from_maps(maps: Vec<[u8; 8]>) -> Result<Self> {
        for (i, m) in maps.iter().enumerate() {
            let mut seen = [false; 8];
            for &v in m {
                if v >= 8 || std::mem::replace(&mut seen[v as usize], true) {
                    return Err(Error::Task(format!("table t{} is not a bijection", i + 1)));
                }
            }
        }
        let names = (1..=maps.len()).map(|i| format!("t{i}")).collect();
        Ok(LookupTableSet { names, maps })
    }

    /// `count` uniformly random bijections.
    pub fn random(count: usize, rng: &mut RngStream) -> Self {
        let maps = (0..count)
            .map(|_| {
                let mut m = [0, 1, 2, 3, 4, 5, 6, 7];
                rng.shuffle(&mut m);
                m
            })
            .collect();
        Self::from_maps(maps).expect("shuffles are bijections")
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn apply(&self, name: &str, v: u8) -> Result<u8> {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Task(format!("unknown lookup table {name:?}")))?;
        Ok(self.maps[i][v as usize])
    }
}

impl TryFrom<Vec<LookupTable>> for LookupTableSet {
    type Error = Error;

    fn try_from(tables: Vec<LookupTable>) -> Result<Self> {
        let mut maps = Vec::with_capacity(tables.len());
        for (i, t) in tables.iter().enumerate() {
            if t.name != format!("t{}", i + 1) || t.map.len() != 8 {
                return Err(Error::Task(format!("malformed lookup table {:?}", t.name)));
            }
            let mut m = [0u8; 8];
            for (slot, s) in m.iter_mut().zip(&t.map) {
                *slot = parse_bits(s)?;
            }
            maps.push(m);
        }
        Self::from_maps(maps)
    }
}

impl From<LookupTableSet> for Vec<LookupTable> {
    fn from(set: LookupTableSet) -> Self {
        set.names
            .into_iter()
            .zip(set.maps)
            .map(|(name, m)| LookupTable {
                name,
                map: m.iter().map(|&v| bits(v)).collect(),
            })
            .collect()
    }
}

/// Values `v1..v_{k+1}` with `v1 = start` and `v_{j+1} = names[j](v_j)`.
pub fn apply_lookup_chain<S: AsRef<str>>(tables: &LookupTableSet, start: &str, names: &[S]) -> Result<Vec<String>> {
    let mut v = parse_bits(start)?;
    let mut out = Vec::with_capacity(names.len() + 1);
    out.push(bits(v));
    for name in names {
        v = tables.apply(name.as_ref(), v)?;
        out.push(bits(v));
    }
    Ok(out)
}
