use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ServerId = u32;

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerSpec {
    pub id: ServerId,
    /// Total over all GPUs of the server.
    pub gpu_mem_bytes: u64,
    pub host_mem_bytes: u64,
    pub ssd_bytes: u64,
    /// Peak FLOP/s over all GPUs of the server.
    pub compute_rate: f64,
    /// PCIe-class bandwidth, bytes/s. Used for SSD paging and between GPUs
    /// of the same server.
    pub intra_bus_bandwidth: f64,
    #[serde(default = "one")]
    pub gpu_count: u32,
    #[serde(default)]
    pub intra_bus_latency_s: f64,
}

impl ServerSpec {
    pub fn validate(&self) -> Result<()> {
        let path = |f: &str| format!("topology.servers[id={}].{f}", self.id);
        if self.gpu_mem_bytes == 0 || self.host_mem_bytes == 0 || self.ssd_bytes == 0 {
            return Err(Error::config(path("capacity"), "all capacities must be > 0"));
        }
        if !(self.compute_rate > 0.0) {
            return Err(Error::config(path("compute_rate"), "must be > 0"));
        }
        if !(self.intra_bus_bandwidth > 0.0) {
            return Err(Error::config(path("intra_bus_bandwidth"), "must be > 0"));
        }
        if self.gpu_count == 0 {
            return Err(Error::config(path("gpu_count"), "must be >= 1"));
        }
        if !(self.intra_bus_latency_s >= 0.0) {
            return Err(Error::config(path("intra_bus_latency_s"), "must be >= 0"));
        }
        Ok(())
    }

    /// The bus connecting this server's GPUs, as a link.
    pub fn intra_link(&self) -> LinkSpec {
        LinkSpec {
            endpoints: [self.id, self.id],
            bandwidth: self.intra_bus_bandwidth,
            propagation_latency: self.intra_bus_latency_s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    pub endpoints: [ServerId; 2],
    /// bytes/s
    pub bandwidth: f64,
    /// seconds
    pub propagation_latency: f64,
}

impl LinkSpec {
    fn key(&self) -> (ServerId, ServerId) {
        let [a, b] = self.endpoints;
        (a.min(b), a.max(b))
    }
}

/// Uplink from any edge server to the cloud.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CloudLink {
    pub bandwidth: f64,
    pub propagation_latency: f64,
}

/// `propagation_latency + bytes / bandwidth`.
pub fn transfer_time(bytes: f64, link: &LinkSpec) -> f64 {
    link.propagation_latency + bytes / link.bandwidth
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeTopology {
    pub servers: Vec<ServerSpec>,
    pub links: Vec<LinkSpec>,
    #[serde(default)]
    pub cloud_link: Option<CloudLink>,
}

/// One directed hop of a route: link index and direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Hop {
    pub link: usize,
    pub from: ServerId,
    pub to: ServerId,
}

impl EdgeTopology {
    pub fn validate(&self) -> Result<()> {
        if self.servers.is_empty() {
            return Err(Error::config("topology.servers", "at least one server is required"));
        }
        let mut ids = BTreeSet::new();
        for s in &self.servers {
            s.validate()?;
            if !ids.insert(s.id) {
                return Err(Error::config("topology.servers", format!("duplicate server id {}", s.id)));
            }
        }
        let mut pairs = BTreeSet::new();
        for (i, l) in self.links.iter().enumerate() {
            let path = format!("topology.links[{i}]");
            let [a, b] = l.endpoints;
            if a == b {
                return Err(Error::config(path, "self-loop"));
            }
            if !ids.contains(&a) || !ids.contains(&b) {
                return Err(Error::config(path, format!("unknown endpoint in {a}-{b}")));
            }
            if !(l.bandwidth > 0.0) {
                return Err(Error::config(format!("{path}.bandwidth"), "must be > 0"));
            }
            if !(l.propagation_latency >= 0.0) {
                return Err(Error::config(format!("{path}.propagation_latency"), "must be >= 0"));
            }
            if !pairs.insert(l.key()) {
                return Err(Error::config(path, format!("duplicate link {a}-{b}")));
            }
        }
        if let Some(c) = &self.cloud_link {
            if !(c.bandwidth > 0.0) || !(c.propagation_latency >= 0.0) {
                return Err(Error::config("topology.cloud_link", "bandwidth must be > 0 and latency >= 0"));
            }
        }
        Ok(())
    }

    pub fn server(&self, id: ServerId) -> Option<&ServerSpec> {
        self.servers.iter().find(|s| s.id == id)
    }

    pub fn link_between(&self, a: ServerId, b: ServerId) -> Option<&LinkSpec> {
        let key = (a.min(b), a.max(b));
        self.links.iter().find(|l| l.key() == key)
    }

    pub fn neighbors(&self, id: ServerId) -> Vec<ServerId> {
        let mut n: Vec<ServerId> = self
            .links
            .iter()
            .filter_map(|l| match l.endpoints {
                [a, b] if a == id => Some(b),
                [a, b] if b == id => Some(a),
                _ => None,
            })
            .collect();
        n.sort_unstable();
        n
    }

    /// Minimum-hop route, ties broken toward smaller server ids.
    pub fn route(&self, from: ServerId, to: ServerId) -> Option<Vec<Hop>> {
        if from == to {
            return Some(Vec::new());
        }
        let mut prev: BTreeMap<ServerId, ServerId> = BTreeMap::new();
        let mut seen = BTreeSet::from([from]);
        let mut queue = VecDeque::from([from]);
        while let Some(u) = queue.pop_front() {
            for v in self.neighbors(u) {
                if seen.insert(v) {
                    prev.insert(v, u);
                    queue.push_back(v);
                }
            }
        }
        if !seen.contains(&to) {
            return None;
        }
        let mut nodes = vec![to];
        while let Some(&p) = prev.get(nodes.last().unwrap()) {
            nodes.push(p);
        }
        nodes.reverse();
        Some(
            nodes
                .windows(2)
                .map(|w| {
                    let link = self
                        .links
                        .iter()
                        .position(|l| l.key() == (w[0].min(w[1]), w[0].max(w[1])))
                        .expect("route follows links");
                    Hop { link, from: w[0], to: w[1] }
                })
                .collect(),
        )
    }

    /// Store-and-forward time along the route, without contention.
    pub fn path_transfer_time(&self, bytes: f64, from: ServerId, to: ServerId) -> Option<f64> {
        self.route(from, to)
            .map(|hops| hops.iter().map(|h| transfer_time(bytes, &self.links[h.link])).sum())
    }

    /// True when all `members` lie in one connected component (routes may
    /// relay through non-members).
    pub fn connects(&self, members: &[ServerId]) -> bool {
        match members.split_first() {
            None => true,
            Some((&first, rest)) => rest.iter().all(|&m| self.route(first, m).is_some()),
        }
    }

    /// `intra_bus_bandwidth / bandwidth` for a server and one of its links.
    pub fn bus_to_link_ratio(&self, server: ServerId, link: &LinkSpec) -> Option<f64> {
        self.server(server).map(|s| s.intra_bus_bandwidth / link.bandwidth)
    }
}
