//! Road network with per-link curb parking and off-street lots.
//!
//! Links are directed: a two-way street is two links. Lengths are in km, speeds in
//! km/hr and densities in veh/km/lane throughout.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LinkId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LotId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    /// Identifier used in network files.
    pub id: u32,
    /// Position in meters.
    pub x: f64,
    pub y: f64,
    pub allows_u_turn: bool,
    /// Vehicles may enter and leave the network here.
    pub gateway: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Link {
    pub id: u32,
    pub from: NodeId,
    pub to: NodeId,
    pub length: f64,
    pub lanes: u32,
    pub free_flow_speed: f64,
    pub jam_density: f64,
    pub parking_capacity: u32,
    /// Spacing between consecutive curb spots, km.
    pub spot_spacing: f64,
    pub region: u32,
}

impl Link {
    /// Vehicles the travel lanes can hold at jam density.
    pub fn storage(&self) -> f64 {
        self.jam_density * self.length * self.lanes as f64
    }

    pub fn free_flow_time_h(&self) -> f64 {
        self.length / self.free_flow_speed
    }

    /// Position of every curb spot along the link, km from the upstream node. Spots
    /// are evenly spaced and centered on the link.
    pub fn spot_positions(&self) -> Vec<f64> {
        let n = self.parking_capacity as usize;
        let start = 0.5 * (self.length - n as f64 * self.spot_spacing).max(0.0);
        (0..n).map(|j| start + (j as f64 + 0.5) * self.spot_spacing).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OffStreetLot {
    pub id: u32,
    /// The lot is entered and left at the downstream end of this link.
    pub entry_link: LinkId,
    pub capacity: u32,
    /// One circuit through the lot, km.
    pub circuit_length: f64,
    pub internal_cruise_speed: f64,
}

impl OffStreetLot {
    pub fn circuit_time_h(&self) -> f64 {
        self.circuit_length / self.internal_cruise_speed
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    nodes: Vec<Node>,
    links: Vec<Link>,
    lots: Vec<OffStreetLot>,
    out_links: Vec<Vec<LinkId>>,
}

/// Greenshields speed-density relation, clamped at zero beyond jam density.
pub fn greenshields_speed(density: f64, free_flow_speed: f64, jam_density: f64) -> f64 {
    (free_flow_speed * (1.0 - density / jam_density)).max(0.0)
}

impl Network {
    pub fn new(nodes: Vec<Node>, links: Vec<Link>, lots: Vec<OffStreetLot>) -> Result<Self> {
        let mut seen = HashMap::new();
        for (i, n) in nodes.iter().enumerate() {
            if seen.insert(n.id, i).is_some() {
                return Err(invalid(format!("duplicate node id {}", n.id)));
            }
        }
        let mut seen = HashMap::new();
        for (i, l) in links.iter().enumerate() {
            if seen.insert(l.id, i).is_some() {
                return Err(invalid(format!("duplicate link id {}", l.id)));
            }
            if l.from.0 >= nodes.len() || l.to.0 >= nodes.len() {
                return Err(invalid(format!("link {} references a missing node", l.id)));
            }
            check_link(l).map_err(|(f, m)| invalid(format!("link {} {f}: {m}", l.id)))?;
        }
        for lot in &lots {
            if lot.entry_link.0 >= links.len() {
                return Err(invalid(format!("lot {} entry link missing", lot.id)));
            }
            check_lot(lot).map_err(|m| invalid(format!("lot {}: {m}", lot.id)))?;
        }
        let mut out_links = vec![Vec::new(); nodes.len()];
        for (i, l) in links.iter().enumerate() {
            out_links[l.from.0].push(LinkId(i));
        }
        let net = Network {
            nodes,
            links,
            lots,
            out_links,
        };
        if net.total_length() <= 0.0 {
            return Err(invalid("network has zero total length"));
        }
        Ok(net)
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn lots(&self) -> &[OffStreetLot] {
        &self.lots
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn link(&self, id: LinkId) -> &Link {
        &self.links[id.0]
    }

    pub fn lot(&self, id: LotId) -> &OffStreetLot {
        &self.lots[id.0]
    }

    pub fn out_links(&self, node: NodeId) -> &[LinkId] {
        &self.out_links[node.0]
    }

    pub fn link_ids(&self) -> impl Iterator<Item = LinkId> {
        (0..self.links.len()).map(LinkId)
    }

    /// Total network length L, km.
    pub fn total_length(&self) -> f64 {
        self.links.iter().map(|l| l.length).sum()
    }

    pub fn total_parking_capacity(&self) -> u32 {
        self.links.iter().map(|l| l.parking_capacity).sum()
    }

    pub fn region_count(&self) -> u32 {
        self.links.iter().map(|l| l.region + 1).max().unwrap_or(1)
    }

    /// The link running opposite to `link`, if any.
    pub fn reverse_of(&self, link: LinkId) -> Option<LinkId> {
        let l = &self.links[link.0];
        self.out_links[l.to.0]
            .iter()
            .copied()
            .find(|&o| self.links[o.0].to == l.from)
    }

    /// Entry/exit nodes. Falls back to every node when none is flagged.
    pub fn gateways(&self) -> Vec<NodeId> {
        let flagged: Vec<NodeId> = (0..self.nodes.len())
            .map(NodeId)
            .filter(|&n| self.nodes[n.0].gateway)
            .collect();
        if flagged.is_empty() {
            (0..self.nodes.len()).map(NodeId).collect()
        } else {
            flagged
        }
    }

    /// Replaces the per-link curb supply, keeping spacing consistent with the length.
    pub fn set_parking_capacity(&mut self, link: LinkId, capacity: u32, spot_spacing: f64) -> Result<()> {
        let l = &mut self.links[link.0];
        let old = (l.parking_capacity, l.spot_spacing);
        l.parking_capacity = capacity;
        l.spot_spacing = spot_spacing;
        if let Err((f, m)) = check_link(l) {
            (l.parking_capacity, l.spot_spacing) = old;
            return Err(invalid(format!("link {} {f}: {m}", l.id)));
        }
        Ok(())
    }

    pub fn add_lot(&mut self, lot: OffStreetLot) -> Result<LotId> {
        if lot.entry_link.0 >= self.links.len() {
            return Err(invalid(format!("lot {} entry link missing", lot.id)));
        }
        check_lot(&lot).map_err(|m| invalid(format!("lot {}: {m}", lot.id)))?;
        self.lots.push(lot);
        Ok(LotId(self.lots.len() - 1))
    }

    /// Free-flow shortest-path tree rooted at `origin`, returned as predecessor links.
    pub fn shortest_path_tree(&self, origin: NodeId) -> ShortestPaths {
        let n = self.nodes.len();
        let mut cost = vec![f64::INFINITY; n];
        let mut pred: Vec<Option<LinkId>> = vec![None; n];
        let mut heap = BinaryHeap::new();
        cost[origin.0] = 0.0;
        heap.push(HeapEntry(0.0, origin.0));
        while let Some(HeapEntry(c, u)) = heap.pop() {
            if c > cost[u] {
                continue;
            }
            for &lid in &self.out_links[u] {
                let l = &self.links[lid.0];
                let nc = c + l.free_flow_time_h();
                if nc < cost[l.to.0] {
                    cost[l.to.0] = nc;
                    pred[l.to.0] = Some(lid);
                    heap.push(HeapEntry(nc, l.to.0));
                }
            }
        }
        ShortestPaths { cost, pred }
    }

    /// True when every node reaches every other node.
    pub fn is_strongly_connected(&self) -> bool {
        (0..self.nodes.len()).all(|o| self.shortest_path_tree(NodeId(o)).cost.iter().all(|c| c.is_finite()))
    }
}

#[derive(Clone, Debug)]
pub struct ShortestPaths {
    pub cost: Vec<f64>,
    pred: Vec<Option<LinkId>>,
}

impl ShortestPaths {
    /// Links from the tree root to `dest`, or `None` when unreachable.
    pub fn path_to(&self, net: &Network, dest: NodeId) -> Option<Vec<LinkId>> {
        if !self.cost[dest.0].is_finite() {
            return None;
        }
        let mut path = Vec::new();
        let mut at = dest;
        while let Some(l) = self.pred[at.0] {
            path.push(l);
            at = net.link(l).from;
        }
        path.reverse();
        Some(path)
    }
}

#[derive(PartialEq)]
struct HeapEntry(f64, usize);

impl Eq for HeapEntry {}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HeapEntry {
    // reversed for a min-heap; ties on node index keep it deterministic
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then_with(|| other.1.cmp(&self.1))
    }
}

/// Checks link invariants, naming the offending field.
fn check_link(l: &Link) -> std::result::Result<(), (&'static str, &'static str)> {
    if !(l.length > 0.0) {
        return Err(("length", "must be > 0"));
    }
    if l.lanes == 0 {
        return Err(("lanes", "must be >= 1"));
    }
    if !(l.free_flow_speed > 0.0) {
        return Err(("free_flow_speed", "must be > 0"));
    }
    if !(l.jam_density > 0.0) {
        return Err(("jam_density", "must be > 0"));
    }
    if !(l.spot_spacing >= 0.0) {
        return Err(("spot_spacing", "must be >= 0"));
    }
    if l.parking_capacity > 0 && l.spot_spacing * l.parking_capacity as f64 > l.length * (1.0 + 1e-12) {
        return Err(("parking_capacity", "spots do not fit on the link"));
    }
    Ok(())
}

fn check_lot(lot: &OffStreetLot) -> std::result::Result<(), String> {
    if !(lot.circuit_length > 0.0) {
        return Err("circuit_length must be > 0".into());
    }
    if !(lot.internal_cruise_speed > 0.0) {
        return Err("internal_cruise_speed must be > 0".into());
    }
    Ok(())
}

/// Bidirectional `rows` x `cols` grid. Perimeter nodes are gateways; the lower half of
/// the rows forms region 0 and the upper half region 1 (a link belongs to the region of
/// its upstream node).
pub fn build_grid(
    rows: usize,
    cols: usize,
    link_length: f64,
    free_flow_speed: f64,
    jam_density: f64,
    parking_capacity_per_link: u32,
    spot_spacing: f64,
) -> Result<Network> {
    if rows < 2 || cols < 2 {
        return Err(invalid(format!("grid needs at least 2x2 nodes, got {rows}x{cols}")));
    }
    if !(link_length > 0.0 && free_flow_speed > 0.0 && jam_density > 0.0) {
        return Err(invalid("grid link length, free-flow speed and jam density must be > 0"));
    }
    if !(spot_spacing >= 0.0) {
        return Err(invalid("spot spacing must be >= 0"));
    }
    let mut nodes = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            nodes.push(Node {
                id: (r * cols + c) as u32,
                x: c as f64 * link_length * 1000.0,
                y: r as f64 * link_length * 1000.0,
                allows_u_turn: false,
                gateway: r == 0 || c == 0 || r == rows - 1 || c == cols - 1,
            });
        }
    }
    let upper = |node: usize| u32::from(node / cols >= rows / 2);
    let mut links = Vec::new();
    let mut push = |from: usize, to: usize| {
        links.push(Link {
            id: links.len() as u32,
            from: NodeId(from),
            to: NodeId(to),
            length: link_length,
            lanes: 1,
            free_flow_speed,
            jam_density,
            parking_capacity: parking_capacity_per_link,
            spot_spacing,
            region: upper(from),
        });
    };
    for r in 0..rows {
        for c in 0..cols {
            let n = r * cols + c;
            if c + 1 < cols {
                push(n, n + 1);
                push(n + 1, n);
            }
            if r + 1 < rows {
                push(n, n + cols);
                push(n + cols, n);
            }
        }
    }
    Network::new(nodes, links, Vec::new())
}

// ---- file format ----------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetworkFile {
    #[serde(default = "default_units")]
    units: HashMap<String, String>,
    nodes: Vec<NodeRecord>,
    links: Vec<LinkRecord>,
    #[serde(default)]
    lots: Vec<LotRecord>,
    #[serde(default)]
    regions: Vec<RegionRecord>,
}

fn default_units() -> HashMap<String, String> {
    [
        ("position", "m"),
        ("length", "km"),
        ("spot_spacing", "km"),
        ("circuit_length", "km"),
        ("speed", "km/hr"),
        ("jam_density", "veh/km/lane"),
        ("capacity", "veh"),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeRecord {
    id: u32,
    x: f64,
    y: f64,
    #[serde(default)]
    allows_u_turn: bool,
    #[serde(default)]
    gateway: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LinkRecord {
    id: u32,
    from: u32,
    to: u32,
    length: f64,
    #[serde(default = "one")]
    lanes: u32,
    free_flow_speed: f64,
    jam_density: f64,
    #[serde(default)]
    parking_capacity: u32,
    #[serde(default)]
    spot_spacing: Option<f64>,
}

fn one() -> u32 {
    1
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LotRecord {
    id: u32,
    entry_link: u32,
    capacity: u32,
    circuit_length: f64,
    internal_cruise_speed: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegionRecord {
    link: u32,
    region: u32,
}

fn parse_err(context: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Parse {
        context: context.into(),
        message: message.into(),
    }
}

/// Parses a network from its JSON text.
pub fn network_from_json(text: &str) -> Result<Network> {
    let file: NetworkFile = serde_json::from_str(text).map_err(|e| {
        parse_err(
            format!("network file line {} column {}", e.line(), e.column()),
            e.to_string(),
        )
    })?;

    let mut node_index = HashMap::new();
    let mut nodes = Vec::with_capacity(file.nodes.len());
    for (i, n) in file.nodes.iter().enumerate() {
        if node_index.insert(n.id, i).is_some() {
            return Err(parse_err(
                format!("nodes[{i}].id"),
                format!("duplicate node id {}", n.id),
            ));
        }
        nodes.push(Node {
            id: n.id,
            x: n.x,
            y: n.y,
            allows_u_turn: n.allows_u_turn,
            gateway: n.gateway,
        });
    }

    let mut link_index = HashMap::new();
    let mut links = Vec::with_capacity(file.links.len());
    for (i, l) in file.links.iter().enumerate() {
        let ctx = |field: &str| format!("links[{i}].{field} (link id {})", l.id);
        if link_index.insert(l.id, i).is_some() {
            return Err(parse_err(ctx("id"), "duplicate link id"));
        }
        let from = *node_index
            .get(&l.from)
            .ok_or_else(|| parse_err(ctx("from"), format!("unknown node {}", l.from)))?;
        let to = *node_index
            .get(&l.to)
            .ok_or_else(|| parse_err(ctx("to"), format!("unknown node {}", l.to)))?;
        let spot_spacing = match l.spot_spacing {
            Some(s) => s,
            None if l.parking_capacity > 0 => l.length / l.parking_capacity as f64,
            None => 0.0,
        };
        let link = Link {
            id: l.id,
            from: NodeId(from),
            to: NodeId(to),
            length: l.length,
            lanes: l.lanes,
            free_flow_speed: l.free_flow_speed,
            jam_density: l.jam_density,
            parking_capacity: l.parking_capacity,
            spot_spacing,
            region: 0,
        };
        check_link(&link).map_err(|(f, m)| parse_err(ctx(f), m))?;
        links.push(link);
    }

    for (i, r) in file.regions.iter().enumerate() {
        let li = *link_index
            .get(&r.link)
            .ok_or_else(|| parse_err(format!("regions[{i}].link"), format!("unknown link {}", r.link)))?;
        links[li].region = r.region;
    }

    let mut lots = Vec::with_capacity(file.lots.len());
    for (i, lot) in file.lots.iter().enumerate() {
        let entry = *link_index.get(&lot.entry_link).ok_or_else(|| {
            parse_err(
                format!("lots[{i}].entry_link"),
                format!("unknown link {}", lot.entry_link),
            )
        })?;
        let lot = OffStreetLot {
            id: lot.id,
            entry_link: LinkId(entry),
            capacity: lot.capacity,
            circuit_length: lot.circuit_length,
            internal_cruise_speed: lot.internal_cruise_speed,
        };
        check_lot(&lot).map_err(|m| parse_err(format!("lots[{i}]"), m))?;
        lots.push(lot);
    }

    Network::new(nodes, links, lots).map_err(|e| parse_err("network", e.to_string()))
}

/// Serializes a network to pretty-printed JSON.
pub fn network_to_json(net: &Network) -> String {
    let file = NetworkFile {
        units: default_units(),
        nodes: net
            .nodes
            .iter()
            .map(|n| NodeRecord {
                id: n.id,
                x: n.x,
                y: n.y,
                allows_u_turn: n.allows_u_turn,
                gateway: n.gateway,
            })
            .collect(),
        links: net
            .links
            .iter()
            .map(|l| LinkRecord {
                id: l.id,
                from: net.nodes[l.from.0].id,
                to: net.nodes[l.to.0].id,
                length: l.length,
                lanes: l.lanes,
                free_flow_speed: l.free_flow_speed,
                jam_density: l.jam_density,
                parking_capacity: l.parking_capacity,
                spot_spacing: Some(l.spot_spacing),
            })
            .collect(),
        lots: net
            .lots
            .iter()
            .map(|lot| LotRecord {
                id: lot.id,
                entry_link: net.links[lot.entry_link.0].id,
                capacity: lot.capacity,
                circuit_length: lot.circuit_length,
                internal_cruise_speed: lot.internal_cruise_speed,
            })
            .collect(),
        regions: net
            .links
            .iter()
            .map(|l| RegionRecord {
                link: l.id,
                region: l.region,
            })
            .collect(),
    };
    serde_json::to_string_pretty(&file).expect("network serializes")
}

pub fn load_network(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    network_from_json(&text).map_err(|e| match e {
        Error::Parse { context, message } => Error::Parse {
            context: format!("{}: {context}", path.display()),
            message,
        },
        other => other,
    })
}

pub fn save_network(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, network_to_json(net)).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_grid_counts() {
        let net = build_grid(2, 2, 0.1, 50.0, 100.0, 10, 0.005).unwrap();
        assert_eq!(net.nodes().len(), 4);
        assert_eq!(net.links().len(), 8);
        assert!((net.total_length() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn four_by_four_grid() {
        let net = build_grid(4, 4, 0.1, 50.0, 100.0, 10, 0.005).unwrap();
        assert_eq!(net.nodes().len(), 16);
        assert_eq!(net.links().len(), 2 * (2 * 4 * 3));
        // interior nodes have four out-links
        for r in 1..3 {
            for c in 1..3 {
                assert_eq!(net.out_links(NodeId(r * 4 + c)).len(), 4);
            }
        }
        assert!(net.is_strongly_connected());
        assert_eq!(net.region_count(), 2);
    }

    #[test]
    fn degenerate_grid_rejected() {
        assert!(matches!(
            build_grid(1, 2, 0.1, 50.0, 100.0, 10, 0.005),
            Err(Error::InvalidArgument(_))
        ));
        assert!(build_grid(2, 2, 0.0, 50.0, 100.0, 10, 0.005).is_err());
        // 30 spots at 5 m do not fit on 100 m
        assert!(build_grid(2, 2, 0.1, 50.0, 100.0, 30, 0.005).is_err());
    }

    #[test]
    fn greenshields_values() {
        assert_eq!(greenshields_speed(0.0, 50.0, 100.0), 50.0);
        assert_eq!(greenshields_speed(100.0, 50.0, 100.0), 0.0);
        assert!((greenshields_speed(40.0, 50.0, 100.0) - 30.0).abs() < 1e-12);
        assert_eq!(greenshields_speed(150.0, 50.0, 100.0), 0.0);
    }

    #[test]
    fn json_round_trip() {
        let mut net = build_grid(2, 2, 0.1, 50.0, 100.0, 10, 0.005).unwrap();
        net.add_lot(OffStreetLot {
            id: 7,
            entry_link: LinkId(3),
            capacity: 100,
            circuit_length: 0.3,
            internal_cruise_speed: 15.0,
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        save_network(&net, &path).unwrap();
        assert_eq!(load_network(&path).unwrap(), net);
    }

    const TWO_NODES: &str = r#"{
        "nodes": [{"id": 1, "x": 0, "y": 0}, {"id": 2, "x": 100, "y": 0}],
        "links": [{"id": 5, "from": 1, "to": 2, "length": LEN,
                   "free_flow_speed": 50, "jam_density": 100, "parking_capacity": 4}]
    }"#;

    #[test]
    fn spacing_defaults_to_even() {
        let net = network_from_json(&TWO_NODES.replace("LEN", "0.1")).unwrap();
        assert!((net.link(LinkId(0)).spot_spacing - 0.025).abs() < 1e-12);
        assert_eq!(net.link(LinkId(0)).lanes, 1);
    }

    #[test]
    fn zero_length_rejected_with_context() {
        let err = network_from_json(&TWO_NODES.replace("LEN", "0")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("links[0].length"), "{msg}");
    }

    #[test]
    fn dangling_node_rejected() {
        let text = TWO_NODES.replace("LEN", "0.1").replace("\"to\": 2", "\"to\": 9");
        let msg = network_from_json(&text).unwrap_err().to_string();
        assert!(msg.contains("links[0].to") && msg.contains("unknown node 9"), "{msg}");
    }

    #[test]
    fn malformed_json_reports_line() {
        let msg = network_from_json("{\n \"nodes\": [ oops ]\n}").unwrap_err().to_string();
        assert!(msg.contains("line 2"), "{msg}");
    }

    #[test]
    fn reverse_and_paths() {
        let net = build_grid(3, 3, 0.1, 50.0, 100.0, 0, 0.0).unwrap();
        let l = LinkId(0);
        let r = net.reverse_of(l).unwrap();
        assert_eq!(net.link(r).to, net.link(l).from);
        let tree = net.shortest_path_tree(NodeId(0));
        let path = tree.path_to(&net, NodeId(8)).unwrap();
        assert_eq!(path.len(), 4);
        assert_eq!(net.link(path[0]).from, NodeId(0));
        assert_eq!(net.link(*path.last().unwrap()).to, NodeId(8));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn greenshields_bounded_and_monotone(k1 in 0.0f64..200.0, dk in 0.0f64..50.0,
                                                 vf in 1.0f64..120.0, kj in 1.0f64..200.0) {
                let a = greenshields_speed(k1, vf, kj);
                let b = greenshields_speed(k1 + dk, vf, kj);
                prop_assert!((0.0..=vf).contains(&a));
                prop_assert!(b <= a);
            }

            #[test]
            fn grids_strongly_connected(rows in 2usize..6, cols in 2usize..6) {
                let net = build_grid(rows, cols, 0.1, 50.0, 100.0, 2, 0.01).unwrap();
                prop_assert!(net.is_strongly_connected());
                prop_assert_eq!(net.links().len(), 2 * (rows * (cols - 1) + cols * (rows - 1)));
            }

            #[test]
            fn file_round_trip(rows in 2usize..5, cols in 2usize..5, cap in 0u32..8,
                               len in 0.05f64..0.5, lot_cap in 1u32..200) {
                let mut net = build_grid(rows, cols, len, 50.0, 100.0, cap, len / 10.0).unwrap();
                net.add_lot(OffStreetLot { id: 0, entry_link: LinkId(1), capacity: lot_cap,
                    circuit_length: 0.3, internal_cruise_speed: 15.0 }).unwrap();
                let back = network_from_json(&network_to_json(&net)).unwrap();
                prop_assert_eq!(back, net);
            }
        }
    }
}
