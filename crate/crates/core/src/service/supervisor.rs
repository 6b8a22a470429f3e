use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::clock::Timestamp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatewayState {
    Healthy,
    Stale,
    Down,
}

impl GatewayState {
    pub fn as_str(self) -> &'static str {
        match self {
            GatewayState::Healthy => "healthy",
            GatewayState::Stale => "stale",
            GatewayState::Down => "down",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatewayStatus {
    pub house_id: String,
    pub last_seen: Option<Timestamp>,
    pub state: GatewayState,
    /// Ticks lost between received points, from gateway sequence gaps.
    pub missed_ticks: u64,
    pub last_seq: Option<u64>,
}

/// A degradation reported by [`Supervisor::tick`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub house_id: String,
    pub from: GatewayState,
    pub to: GatewayState,
    pub at: Timestamp,
}

/// Gateway health table. Healthy while silent for less than
/// `stale_factor × refresh`, Stale until `down_factor × refresh`, Down
/// afterwards or when never seen.
#[derive(Debug, Clone)]
pub struct Supervisor {
    refresh_s: i64,
    stale_factor: i64,
    down_factor: i64,
    table: BTreeMap<String, GatewayStatus>,
}

impl Supervisor {
    pub fn new<I: IntoIterator<Item = String>>(houses: I, refresh_s: u32, stale_factor: u32, down_factor: u32) -> Self {
        let table = houses
            .into_iter()
            .map(|h| {
                let s = GatewayStatus {
                    house_id: h.clone(),
                    last_seen: None,
                    state: GatewayState::Down,
                    missed_ticks: 0,
                    last_seq: None,
                };
                (h, s)
            })
            .collect();
        Supervisor {
            refresh_s: i64::from(refresh_s),
            stale_factor: i64::from(stale_factor),
            down_factor: i64::from(down_factor),
            table,
        }
    }

    pub fn classify(&self, last_seen: Option<Timestamp>, now: Timestamp) -> GatewayState {
        match last_seen {
            None => GatewayState::Down,
            Some(t) => {
                let silence = now - t;
                if silence < self.stale_factor * self.refresh_s {
                    GatewayState::Healthy
                } else if silence < self.down_factor * self.refresh_s {
                    GatewayState::Stale
                } else {
                    GatewayState::Down
                }
            }
        }
    }

    /// Records a telemetry point received at `at`. Only fresh telemetry
    /// brings a gateway back to Healthy.
    pub fn observe(&mut self, house: &str, at: Timestamp, seq: u64) {
        let s = self.table.entry(house.to_string()).or_insert_with(|| GatewayStatus {
            house_id: house.to_string(),
            last_seen: None,
            state: GatewayState::Down,
            missed_ticks: 0,
            last_seq: None,
        });
        if let Some(prev) = s.last_seq {
            if seq > prev + 1 {
                s.missed_ticks += seq - prev - 1;
            }
        }
        s.last_seq = Some(s.last_seq.map_or(seq, |p| p.max(seq)));
        s.last_seen = Some(s.last_seen.map_or(at, |t| t.max(at)));
        s.state = GatewayState::Healthy;
    }

    /// Re-evaluates every gateway at `now`; returns the degradations.
    pub fn tick(&mut self, now: Timestamp) -> Vec<Transition> {
        let mut out = Vec::new();
        let states: Vec<(String, GatewayState)> = self
            .table
            .values()
            .map(|s| (s.house_id.clone(), self.classify(s.last_seen, now)))
            .collect();
        for (house, next) in states {
            let s = self.table.get_mut(&house).expect("house from table");
            if next > s.state {
                out.push(Transition {
                    house_id: house,
                    from: s.state,
                    to: next,
                    at: now,
                });
            }
            s.state = next;
        }
        out
    }

    pub fn status(&self, house: &str) -> Option<&GatewayStatus> {
        self.table.get(house)
    }

    pub fn statuses(&self) -> Vec<GatewayStatus> {
        self.table.values().cloned().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sup() -> Supervisor {
        Supervisor::new(["h1".to_string(), "h2".to_string()], 30, 2, 6)
    }

    #[test]
    fn never_seen_is_down() {
        let mut s = sup();
        assert!(s.tick(1000).is_empty());
        assert_eq!(s.status("h1").unwrap().state, GatewayState::Down);
    }

    #[test]
    fn thresholds() {
        let mut s = sup();
        s.observe("h1", 0, 1);
        s.tick(59);
        assert_eq!(s.status("h1").unwrap().state, GatewayState::Healthy);
        let t = s.tick(70);
        assert_eq!(s.status("h1").unwrap().state, GatewayState::Stale);
        assert_eq!(t.len(), 1);
        assert!(s.tick(179).is_empty());
        let t = s.tick(180);
        assert_eq!((t[0].from, t[0].to), (GatewayState::Stale, GatewayState::Down));
    }

    #[test]
    fn jump_straight_to_down() {
        let mut s = sup();
        s.observe("h1", 0, 1);
        let t = s.tick(500);
        assert_eq!((t[0].from, t[0].to), (GatewayState::Healthy, GatewayState::Down));
    }

    #[test]
    fn seq_gaps_count_missed_ticks() {
        let mut s = sup();
        s.observe("h1", 0, 1);
        s.observe("h1", 30, 2);
        s.observe("h1", 150, 6);
        assert_eq!(s.status("h1").unwrap().missed_ticks, 3);
    }
}
