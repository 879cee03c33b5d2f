use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::link::{LinkKind, LinkProfile};

/// Identity that traffic is attributed to. One per host process; the proxy and
/// memory node charge their own housekeeping to [`ClientId::SYSTEM`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClientId(pub u32);

impl ClientId {
    pub const SYSTEM: ClientId = ClientId(0);
}

impl std::fmt::Display for ClientId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "client{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrafficClass {
    /// On the application's critical path.
    OnDemand,
    /// Prefetch fills and preloads.
    Background,
}

/// Who pays for a transfer, and in which bucket.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Charge {
    pub class: TrafficClass,
    pub client: ClientId,
}

impl Charge {
    pub fn on_demand(client: ClientId) -> Self {
        Charge { class: TrafficClass::OnDemand, client }
    }

    pub fn background(client: ClientId) -> Self {
        Charge { class: TrafficClass::Background, client }
    }
}

/// Byte and operation tallies of one link (or one client's share of it).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LinkTraffic {
    pub bytes_on_demand: u64,
    pub bytes_background: u64,
    /// Messages and one-sided operations.
    pub messages: u64,
    /// Doorbells rung; a batch of k operations counts once.
    pub batches: u64,
    pub payload_bytes: u64,
    pub header_bytes: u64,
    pub modeled_secs: f64,
}

impl LinkTraffic {
    pub fn total_bytes(&self) -> u64 {
        self.bytes_on_demand + self.bytes_background
    }

    fn add(&mut self, other: &LinkTraffic) {
        self.bytes_on_demand += other.bytes_on_demand;
        self.bytes_background += other.bytes_background;
        self.messages += other.messages;
        self.batches += other.batches;
        self.payload_bytes += other.payload_bytes;
        self.header_bytes += other.header_bytes;
        self.modeled_secs += other.modeled_secs;
    }

    /// `self - earlier`, for counters that only grow.
    pub fn since(&self, earlier: &LinkTraffic) -> LinkTraffic {
        LinkTraffic {
            bytes_on_demand: self.bytes_on_demand - earlier.bytes_on_demand,
            bytes_background: self.bytes_background - earlier.bytes_background,
            messages: self.messages - earlier.messages,
            batches: self.batches - earlier.batches,
            payload_bytes: self.payload_bytes - earlier.payload_bytes,
            header_bytes: self.header_bytes - earlier.header_bytes,
            modeled_secs: self.modeled_secs - earlier.modeled_secs,
        }
    }
}

/// Point-in-time copy of every counter on a fabric.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrafficSnapshot {
    pub links: BTreeMap<LinkKind, LinkTraffic>,
    pub clients: BTreeMap<ClientId, BTreeMap<LinkKind, LinkTraffic>>,
}

impl TrafficSnapshot {
    pub fn link(&self, kind: LinkKind) -> LinkTraffic {
        self.links.get(&kind).copied().unwrap_or_default()
    }

    pub fn client(&self, client: ClientId, kind: LinkKind) -> LinkTraffic {
        self.clients.get(&client).and_then(|m| m.get(&kind)).copied().unwrap_or_default()
    }

    /// Sum of the per-client tallies of one link.
    pub fn client_sum(&self, kind: LinkKind) -> LinkTraffic {
        let mut sum = LinkTraffic::default();
        for per_link in self.clients.values() {
            if let Some(t) = per_link.get(&kind) {
                sum.add(t);
            }
        }
        sum
    }

    pub fn since(&self, earlier: &TrafficSnapshot) -> TrafficSnapshot {
        let links = self
            .links
            .iter()
            .map(|(k, t)| (*k, t.since(&earlier.link(*k))))
            .collect();
        let clients = self
            .clients
            .iter()
            .map(|(c, per)| {
                let per = per.iter().map(|(k, t)| (*k, t.since(&earlier.client(*c, *k)))).collect();
                (*c, per)
            })
            .collect();
        TrafficSnapshot { links, clients }
    }

    /// Recompute modeled time from the integer tallies.
    fn finish(&mut self, profiles: &[LinkProfile]) {
        let busy = |kind: LinkKind, t: &mut LinkTraffic| {
            if let Some(p) = profiles.iter().find(|p| p.kind == kind) {
                t.modeled_secs = p.busy_time(t.batches, t.payload_bytes);
            }
        };
        for (k, t) in self.links.iter_mut() {
            busy(*k, t);
        }
        for per in self.clients.values_mut() {
            for (k, t) in per.iter_mut() {
                busy(*k, t);
            }
        }
    }
}

#[derive(Default)]
struct AtomicLink {
    bytes_on_demand: AtomicU64,
    bytes_background: AtomicU64,
    messages: AtomicU64,
    batches: AtomicU64,
    payload_bytes: AtomicU64,
    header_bytes: AtomicU64,
}

impl AtomicLink {
    fn load(&self) -> LinkTraffic {
        LinkTraffic {
            bytes_on_demand: self.bytes_on_demand.load(Ordering::Acquire),
            bytes_background: self.bytes_background.load(Ordering::Acquire),
            messages: self.messages.load(Ordering::Acquire),
            batches: self.batches.load(Ordering::Acquire),
            payload_bytes: self.payload_bytes.load(Ordering::Acquire),
            header_bytes: self.header_bytes.load(Ordering::Acquire),
            modeled_secs: 0.0,
        }
    }
}

/// Link totals are kept apart from the per-client ledger so that the two can be
/// cross-checked against each other.
pub(crate) struct TrafficCounters {
    intra: AtomicLink,
    net: AtomicLink,
    per_client: Mutex<BTreeMap<(ClientId, LinkKind), LinkTraffic>>,
    profiles: [LinkProfile; 2],
}

/// One accounting event: `messages` operations, `payload` bytes, `header` bytes,
/// rung with `doorbells` doorbells.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Tally {
    pub messages: u64,
    pub payload: u64,
    pub header: u64,
    pub doorbells: u64,
}

impl TrafficCounters {
    pub fn new(intra: LinkProfile, net: LinkProfile) -> Self {
        TrafficCounters {
            intra: AtomicLink::default(),
            net: AtomicLink::default(),
            per_client: Mutex::new(BTreeMap::new()),
            profiles: [intra, net],
        }
    }

    pub fn profile(&self, kind: LinkKind) -> LinkProfile {
        match kind {
            LinkKind::Intra => self.profiles[0],
            LinkKind::Net => self.profiles[1],
        }
    }

    fn link(&self, kind: LinkKind) -> &AtomicLink {
        match kind {
            LinkKind::Intra => &self.intra,
            LinkKind::Net => &self.net,
        }
    }

    pub fn record(&self, kind: LinkKind, charge: Charge, tally: Tally) {
        let bytes = tally.payload + tally.header;
        let link = self.link(kind);
        match charge.class {
            TrafficClass::OnDemand => link.bytes_on_demand.fetch_add(bytes, Ordering::AcqRel),
            TrafficClass::Background => link.bytes_background.fetch_add(bytes, Ordering::AcqRel),
        };
        link.messages.fetch_add(tally.messages, Ordering::AcqRel);
        link.batches.fetch_add(tally.doorbells, Ordering::AcqRel);
        link.payload_bytes.fetch_add(tally.payload, Ordering::AcqRel);
        link.header_bytes.fetch_add(tally.header, Ordering::AcqRel);

        let mut clients = self.per_client.lock();
        let entry = clients.entry((charge.client, kind)).or_default();
        match charge.class {
            TrafficClass::OnDemand => entry.bytes_on_demand += bytes,
            TrafficClass::Background => entry.bytes_background += bytes,
        }
        entry.messages += tally.messages;
        entry.batches += tally.doorbells;
        entry.payload_bytes += tally.payload;
        entry.header_bytes += tally.header;
    }

    pub fn snapshot(&self) -> TrafficSnapshot {
        let mut snap = TrafficSnapshot::default();
        for kind in LinkKind::ALL {
            snap.links.insert(kind, self.link(kind).load());
        }
        for ((client, kind), t) in self.per_client.lock().iter() {
            snap.clients.entry(*client).or_default().insert(*kind, *t);
        }
        snap.finish(&self.profiles);
        snap
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn client_ledger_sums_to_link_total() {
        let c = TrafficCounters::new(LinkProfile::default_intra(), LinkProfile::default_net());
        let t = |p| Tally { messages: 1, payload: p, header: 64, doorbells: 1 };
        c.record(LinkKind::Net, Charge::on_demand(ClientId(1)), t(100));
        c.record(LinkKind::Net, Charge::background(ClientId(2)), t(50));
        c.record(LinkKind::Intra, Charge::on_demand(ClientId(2)), t(7));
        let s = c.snapshot();
        let net = s.link(LinkKind::Net);
        assert_eq!(net.bytes_on_demand, 164);
        assert_eq!(net.bytes_background, 114);
        assert_eq!(net.total_bytes(), 278);
        assert_eq!(s.client_sum(LinkKind::Net).total_bytes(), net.total_bytes());
        assert_eq!(s.client(ClientId(2), LinkKind::Intra).payload_bytes, 7);
    }

    #[test]
    fn snapshot_difference() {
        let c = TrafficCounters::new(LinkProfile::default_intra(), LinkProfile::default_net());
        c.record(LinkKind::Net, Charge::on_demand(ClientId(1)), Tally { messages: 1, payload: 10, header: 64, doorbells: 1 });
        let before = c.snapshot();
        c.record(LinkKind::Net, Charge::on_demand(ClientId(1)), Tally { messages: 2, payload: 20, header: 64, doorbells: 1 });
        let d = c.snapshot().since(&before);
        assert_eq!(d.link(LinkKind::Net).total_bytes(), 84);
        assert_eq!(d.link(LinkKind::Net).messages, 2);
        assert_eq!(d.client(ClientId(1), LinkKind::Net).total_bytes(), 84);
    }
}
