//! Grid network topology, signal phases, turning movements, and the
//! protected-network / cordon geometry.
//!
//! A network is a `rows x cols` grid of four-leg intersections joined by
//! bidirectional links, with one external terminal per boundary approach.
//! The protected network (PN) is a strictly interior rectangle of
//! fixed-time intersections plus the ring of signals immediately around
//! it; that ring is the cordon. Links arriving at a cordon signal from
//! outside the PN region are gate links: demand enters there and that is
//! where perimeter strategies meter.
//!
//! All construction is deterministic: identical inputs yield identical
//! identifiers and byte-identical serialized text.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{CoreError, CoreResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LinkId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MovementId(pub u32);

impl LinkId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl MovementId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Compass direction of travel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bearing {
    North,
    East,
    South,
    West,
}

impl Bearing {
    pub const ALL: [Bearing; 4] = [Bearing::North, Bearing::East, Bearing::South, Bearing::West];

    pub fn opposite(self) -> Bearing {
        match self {
            Bearing::North => Bearing::South,
            Bearing::East => Bearing::West,
            Bearing::South => Bearing::North,
            Bearing::West => Bearing::East,
        }
    }

    pub fn clockwise(self) -> Bearing {
        match self {
            Bearing::North => Bearing::East,
            Bearing::East => Bearing::South,
            Bearing::South => Bearing::West,
            Bearing::West => Bearing::North,
        }
    }

    pub fn counter_clockwise(self) -> Bearing {
        self.clockwise().opposite()
    }

    fn idx(self) -> usize {
        match self {
            Bearing::North => 0,
            Bearing::East => 1,
            Bearing::South => 2,
            Bearing::West => 3,
        }
    }

    pub fn letter(self) -> char {
        match self {
            Bearing::North => 'N',
            Bearing::East => 'E',
            Bearing::South => 'S',
            Bearing::West => 'W',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TurnKind {
    Through,
    Left,
    Right,
}

impl TurnKind {
    fn label(self) -> &'static str {
        match self {
            TurnKind::Through => "through",
            TurnKind::Left => "left",
            TurnKind::Right => "right",
        }
    }
}

/// Whether a movement carries vehicles across the cordon.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Crossing {
    Inflow,
    Outflow,
    None,
}

impl Crossing {
    fn label(self) -> &'static str {
        match self {
            Crossing::Inflow => "inflow",
            Crossing::Outflow => "outflow",
            Crossing::None => "none",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    /// Grid intersection at (row, col).
    Grid { row: u32, col: u32 },
    /// External terminal feeding/draining one boundary approach.
    Terminal { side: Bearing, index: u32 },
}

#[derive(Debug, Clone)]
pub struct Link {
    pub id: LinkId,
    pub from: NodeId,
    pub to: NodeId,
    pub length_m: f64,
    pub lanes: u32,
    pub speed_mps: f64,
    pub bearing: Bearing,
    pub is_gate: bool,
    pub inside_pn: bool,
}

impl Link {
    pub fn free_flow_s(&self) -> f64 {
        self.length_m / self.speed_mps
    }
}

#[derive(Debug, Clone)]
pub struct Movement {
    pub id: MovementId,
    pub from_link: LinkId,
    pub to_link: LinkId,
    pub turn: TurnKind,
    pub crossing: Crossing,
    pub signal: NodeId,
    /// Position in the owning intersection's movement list; phase masks
    /// index this.
    pub local_idx: u8,
}

#[derive(Debug, Clone)]
pub struct Phase {
    /// Bit i set = movement with local index i gets green.
    pub green_mask: u16,
    /// The phase that closes the cordon: green only for outflow movements.
    pub is_gating: bool,
}

impl Phase {
    pub fn grants(&self, local_idx: u8) -> bool {
        self.green_mask & (1 << local_idx) != 0
    }
}

/// Cordon edge a signal belongs to. North and South own their corners.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Edge {
    North,
    East,
    South,
    West,
}

impl Edge {
    pub fn outward(self) -> Bearing {
        match self {
            Edge::North => Bearing::North,
            Edge::East => Bearing::East,
            Edge::South => Bearing::South,
            Edge::West => Bearing::West,
        }
    }

    pub fn letter(self) -> char {
        self.outward().letter()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SignalKind {
    /// Cordon signal: two local phases plus the gating phase.
    Cordon { edge: Edge, edge_pos: u32 },
    /// Interior PN intersection on a fixed two-phase timetable.
    FixedTwoPhase,
    /// No signal; every movement is always served.
    Unsignalized,
}

#[derive(Debug, Clone)]
pub struct Intersection {
    pub node: NodeId,
    pub kind: SignalKind,
    /// Incoming link per approach side, indexed N, E, S, W.
    pub incoming: [LinkId; 4],
    /// Outgoing link per exit bearing, indexed N, E, S, W.
    pub outgoing: [LinkId; 4],
    pub movements: Vec<MovementId>,
    pub phases: Vec<Phase>,
}

impl Intersection {
    pub fn is_cordon(&self) -> bool {
        matches!(self.kind, SignalKind::Cordon { .. })
    }

    /// Index of the gating phase, if this is a cordon signal.
    pub fn gating_phase(&self) -> Option<usize> {
        self.phases.iter().position(|p| p.is_gating)
    }

    /// Approach legs in canonical orientation. Cordon signals list
    /// outward first then clockwise, so a trained agent reads the same
    /// layout on every edge; other intersections list N, E, S, W.
    pub fn legs_canonical(&self) -> [LinkId; 4] {
        let start = match self.kind {
            SignalKind::Cordon { edge, .. } => edge.outward(),
            _ => Bearing::North,
        };
        let mut legs = [LinkId(0); 4];
        let mut b = start;
        for leg in legs.iter_mut() {
            *leg = self.incoming[b.idx()];
            b = b.clockwise();
        }
        legs
    }
}

/// Parameters for [`Network::build_grid`].
#[derive(Debug, Clone)]
pub struct GridSpec {
    pub rows: u32,
    pub cols: u32,
    /// Top-left of the interior fixed-control rectangle, in grid rows/cols.
    pub pn_row0: u32,
    pub pn_col0: u32,
    pub pn_rows: u32,
    pub pn_cols: u32,
    /// Length of links between grid intersections.
    pub grid_link_m: f64,
    /// Length of the external boundary stubs (gates and exits).
    pub stub_link_m: f64,
    pub lanes: u32,
    pub speed_mps: f64,
    pub vehicle_len_m: f64,
    pub min_gap_m: f64,
    /// Queue discharge rate per lane while green, veh/s.
    pub saturation_flow: f64,
}

impl GridSpec {
    /// 5x5 grid, 3x3 interior, 300 m streets, 1000 m gates, two lanes,
    /// 50 km/h.
    pub fn paper_5x5() -> GridSpec {
        GridSpec {
            rows: 5,
            cols: 5,
            pn_row0: 1,
            pn_col0: 1,
            pn_rows: 3,
            pn_cols: 3,
            grid_link_m: 300.0,
            stub_link_m: 1000.0,
            lanes: 2,
            speed_mps: 13.9,
            vehicle_len_m: 5.0,
            min_gap_m: 2.5,
            saturation_flow: 0.5,
        }
    }

    /// Smallest legal instance; sized so full closed-loop experiments run
    /// in seconds.
    pub fn desk_3x3() -> GridSpec {
        GridSpec {
            rows: 3,
            cols: 3,
            pn_row0: 1,
            pn_col0: 1,
            pn_rows: 1,
            pn_cols: 1,
            grid_link_m: 300.0,
            stub_link_m: 500.0,
            lanes: 2,
            speed_mps: 13.9,
            vehicle_len_m: 5.0,
            min_gap_m: 2.5,
            saturation_flow: 0.5,
        }
    }

    pub fn footprint_m(&self) -> f64 {
        self.vehicle_len_m + self.min_gap_m
    }
}

/// Immutable network; safe to share read-only across concurrent runs.
#[derive(Debug, Clone)]
pub struct Network {
    pub spec: GridSpec,
    pub links: Vec<Link>,
    pub nodes: Vec<NodeKind>,
    /// One entry per grid node, indexed by node id.
    pub intersections: Vec<Intersection>,
    pub movements: Vec<Movement>,
    /// Cordon signals ordered edge by edge: N, E, S, W, position ascending.
    pub cordon_signals: Vec<NodeId>,
    /// Gate links in boundary order: N by column, E by row, S, W.
    pub gate_links: Vec<LinkId>,
    /// Links inside the protected network, ascending.
    pub pn_links: Vec<LinkId>,
    /// Per from-link successors: (to-link, movement), sorted by to-link.
    out_movements: Vec<Vec<(LinkId, MovementId)>>,
}

impl Network {
    pub fn build_grid(spec: &GridSpec) -> CoreResult<Network> {
        validate_spec(spec)?;
        Builder::new(spec.clone()).build()
    }

    pub fn link(&self, id: LinkId) -> &Link {
        &self.links[id.index()]
    }

    pub fn movement(&self, id: MovementId) -> &Movement {
        &self.movements[id.index()]
    }

    pub fn intersection(&self, node: NodeId) -> &Intersection {
        &self.intersections[node.0 as usize]
    }

    pub fn is_grid_node(&self, node: NodeId) -> bool {
        (node.0 as usize) < self.intersections.len()
    }

    /// Vehicles a link can store: floor(length x lanes / footprint).
    pub fn storage(&self, id: LinkId) -> u32 {
        let l = self.link(id);
        (l.length_m * f64::from(l.lanes) / self.spec.footprint_m()) as u32
    }

    /// Occupied fraction of a link holding `count` vehicles.
    pub fn occupancy(&self, id: LinkId, count: u32) -> f64 {
        let l = self.link(id);
        f64::from(count) * self.spec.footprint_m() / (l.length_m * f64::from(l.lanes))
    }

    /// Queue service rate of a link while green, veh/s over all lanes.
    pub fn discharge_rate(&self, id: LinkId) -> f64 {
        self.spec.saturation_flow * f64::from(self.link(id).lanes)
    }

    pub fn successors(&self, from: LinkId) -> &[(LinkId, MovementId)] {
        &self.out_movements[from.index()]
    }

    pub fn find_movement(&self, from: LinkId, to: LinkId) -> Option<MovementId> {
        self.out_movements[from.index()]
            .iter()
            .find(|(t, _)| *t == to)
            .map(|(_, m)| *m)
    }

    /// Inflow and outflow movement sets of a cordon signal, ascending.
    pub fn movement_sets(&self, node: NodeId) -> CoreResult<(Vec<MovementId>, Vec<MovementId>)> {
        let inter = self.cordon_intersection(node)?;
        let mut inflow = Vec::new();
        let mut outflow = Vec::new();
        for &m in &inter.movements {
            match self.movement(m).crossing {
                Crossing::Inflow => inflow.push(m),
                Crossing::Outflow => outflow.push(m),
                Crossing::None => {}
            }
        }
        Ok((inflow, outflow))
    }

    /// Splits the inflow/outflow movement sets of `node` against the green
    /// set of one of its phases.
    pub fn phase_overlap(&self, node: NodeId, phase_idx: usize) -> CoreResult<PhaseOverlap> {
        let inter = self.cordon_intersection(node)?;
        let phase = inter.phases.get(phase_idx).ok_or_else(|| {
            CoreError::Domain(format!("node {} has no phase {phase_idx}", node.0))
        })?;
        let (inflow, outflow) = self.movement_sets(node)?;
        let split = |set: &[MovementId]| -> (Vec<MovementId>, Vec<MovementId>) {
            set.iter()
                .partition(|&&m| phase.grants(self.movement(m).local_idx))
        };
        let (out_overlap, out_complement) = split(&outflow);
        let (in_overlap, in_complement) = split(&inflow);
        Ok(PhaseOverlap {
            out_overlap,
            out_complement,
            in_overlap,
            in_complement,
        })
    }

    fn cordon_intersection(&self, node: NodeId) -> CoreResult<&Intersection> {
        if !self.is_grid_node(node) {
            return Err(CoreError::Domain(format!(
                "node {} is not an intersection",
                node.0
            )));
        }
        let inter = self.intersection(node);
        if !inter.is_cordon() {
            return Err(CoreError::Domain(format!(
                "node {} is not a cordon signal",
                node.0
            )));
        }
        Ok(inter)
    }

    /// The exit stub paired with a gate link (same terminal, reverse way).
    pub fn twin_exit(&self, gate: LinkId) -> LinkId {
        // Stubs are built in (inbound, outbound) pairs, so the twin is the
        // next id.
        debug_assert!(self.link(gate).is_gate);
        LinkId(gate.0 + 1)
    }

    /// All outbound boundary stubs, in boundary order.
    pub fn exit_links(&self) -> Vec<LinkId> {
        self.links
            .iter()
            .filter(|l| {
                matches!(self.nodes[l.to.0 as usize], NodeKind::Terminal { .. })
            })
            .map(|l| l.id)
            .collect()
    }

    /// Exit stub straight across the grid from a gate (same row/column,
    /// opposite side).
    pub fn opposite_exit(&self, gate: LinkId) -> LinkId {
        let g = self.link(gate);
        let head = self.intersection(g.to);
        let mut node = head.node;
        // Walk the gate's bearing until the outgoing link in that bearing
        // leaves the grid.
        loop {
            let inter = self.intersection(node);
            let out = inter.outgoing[g.bearing.idx()];
            let out_link = self.link(out);
            if matches!(self.nodes[out_link.to.0 as usize], NodeKind::Terminal { .. }) {
                return out;
            }
            node = out_link.to;
        }
    }

    /// First PN link continuing straight from a gate.
    pub fn gate_through_target(&self, gate: LinkId) -> LinkId {
        let g = self.link(gate);
        self.intersection(g.to).outgoing[g.bearing.idx()]
    }

    /// Boundary side a gate's demand arrives from.
    pub fn gate_side(&self, gate: LinkId) -> Bearing {
        self.link(gate).bearing.opposite()
    }

    /// Cordon signals on one edge, position ascending.
    pub fn edge_signals(&self, edge: Edge) -> Vec<NodeId> {
        self.cordon_signals
            .iter()
            .copied()
            .filter(|&n| matches!(self.intersection(n).kind,
                SignalKind::Cordon { edge: e, .. } if e == edge))
            .collect()
    }

    /// Same-edge neighbors of a cordon signal (predecessor, successor).
    pub fn edge_neighbors(&self, node: NodeId) -> [Option<NodeId>; 2] {
        let SignalKind::Cordon { edge, edge_pos } = self.intersection(node).kind else {
            return [None, None];
        };
        let on_edge = self.edge_signals(edge);
        let pos = edge_pos as usize;
        [
            pos.checked_sub(1).map(|p| on_edge[p]),
            on_edge.get(pos + 1).copied(),
        ]
    }

    /// Canonical human-readable form; byte-identical for identical inputs.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let spec = &self.spec;
        s.push_str("# network v1\n");
        s.push_str(&format!(
            "grid rows={} cols={} pn_row0={} pn_col0={} pn_rows={} pn_cols={}\n",
            spec.rows, spec.cols, spec.pn_row0, spec.pn_col0, spec.pn_rows, spec.pn_cols
        ));
        s.push_str(&format!(
            "params grid_link_m={} stub_link_m={} lanes={} speed_mps={} footprint_m={} sat_flow={}\n",
            spec.grid_link_m,
            spec.stub_link_m,
            spec.lanes,
            spec.speed_mps,
            spec.footprint_m(),
            spec.saturation_flow
        ));
        for l in &self.links {
            s.push_str(&format!(
                "link {} {}->{} bearing={} len={} lanes={} speed={} gate={} pn={}\n",
                l.id.0,
                self.node_name(l.from),
                self.node_name(l.to),
                l.bearing.letter(),
                l.length_m,
                l.lanes,
                l.speed_mps,
                u8::from(l.is_gate),
                u8::from(l.inside_pn),
            ));
        }
        for inter in &self.intersections {
            let kind = match inter.kind {
                SignalKind::Cordon { edge, edge_pos } => {
                    format!("cordon edge={} pos={}", edge.letter(), edge_pos)
                }
                SignalKind::FixedTwoPhase => String::from("fixed"),
                SignalKind::Unsignalized => String::from("open"),
            };
            s.push_str(&format!(
                "intersection {} kind={}\n",
                self.node_name(inter.node),
                kind
            ));
            for &m in &inter.movements {
                let mv = self.movement(m);
                s.push_str(&format!(
                    "  movement {} {}->{} turn={} crossing={}\n",
                    mv.id.0,
                    mv.from_link.0,
                    mv.to_link.0,
                    mv.turn.label(),
                    mv.crossing.label()
                ));
            }
            for (i, p) in inter.phases.iter().enumerate() {
                let greens: Vec<String> = inter
                    .movements
                    .iter()
                    .filter(|&&m| p.grants(self.movement(m).local_idx))
                    .map(|m| format!("{}", m.0))
                    .collect();
                s.push_str(&format!(
                    "  phase {} gating={} green={}\n",
                    i,
                    u8::from(p.is_gating),
                    greens.join(",")
                ));
            }
        }
        s
    }

    pub fn node_name(&self, node: NodeId) -> String {
        match self.nodes[node.0 as usize] {
            NodeKind::Grid { row, col } => format!("n{row}_{col}"),
            NodeKind::Terminal { side, index } => format!("t{}{}", side.letter(), index),
        }
    }
}

/// Result of [`Network::phase_overlap`]: exact partitions of the outflow
/// and inflow movement sets by membership in a phase's green set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhaseOverlap {
    pub out_overlap: Vec<MovementId>,
    pub out_complement: Vec<MovementId>,
    pub in_overlap: Vec<MovementId>,
    pub in_complement: Vec<MovementId>,
}

fn validate_spec(spec: &GridSpec) -> CoreResult<()> {
    if spec.rows < 3 || spec.cols < 3 {
        return Err(CoreError::Geometry(format!(
            "grid must be at least 3x3, got {}x{}",
            spec.rows, spec.cols
        )));
    }
    if spec.pn_rows == 0 || spec.pn_cols == 0 {
        return Err(CoreError::Geometry(String::from("pn rectangle is empty")));
    }
    let touches = spec.pn_row0 == 0
        || spec.pn_col0 == 0
        || spec.pn_row0 + spec.pn_rows >= spec.rows
        || spec.pn_col0 + spec.pn_cols >= spec.cols;
    if touches {
        return Err(CoreError::Geometry(String::from(
            "pn rectangle must be strictly interior",
        )));
    }
    for (name, v) in [
        ("grid_link_m", spec.grid_link_m),
        ("stub_link_m", spec.stub_link_m),
        ("speed_mps", spec.speed_mps),
        ("vehicle_len_m", spec.vehicle_len_m),
        ("saturation_flow", spec.saturation_flow),
    ] {
        if v <= 0.0 || !v.is_finite() {
            return Err(CoreError::Geometry(format!("{name} must be positive")));
        }
    }
    if spec.min_gap_m < 0.0 {
        return Err(CoreError::Geometry(String::from("min_gap_m must be >= 0")));
    }
    if spec.lanes == 0 {
        return Err(CoreError::Geometry(String::from("lanes must be >= 1")));
    }
    let min_len = if spec.grid_link_m < spec.stub_link_m {
        spec.grid_link_m
    } else {
        spec.stub_link_m
    };
    if min_len * f64::from(spec.lanes) / spec.footprint_m() < 1.0 {
        return Err(CoreError::Geometry(String::from(
            "links must store at least one vehicle",
        )));
    }
    Ok(())
}

struct Builder {
    spec: GridSpec,
    links: Vec<Link>,
    nodes: Vec<NodeKind>,
    gate_links: Vec<LinkId>,
}

impl Builder {
    fn new(spec: GridSpec) -> Builder {
        Builder {
            spec,
            links: Vec::new(),
            nodes: Vec::new(),
            gate_links: Vec::new(),
        }
    }

    fn grid_node(&self, r: u32, c: u32) -> NodeId {
        NodeId(r * self.spec.cols + c)
    }

    fn in_pn_rect(&self, r: u32, c: u32) -> bool {
        let s = &self.spec;
        r >= s.pn_row0 && r < s.pn_row0 + s.pn_rows && c >= s.pn_col0 && c < s.pn_col0 + s.pn_cols
    }

    /// PN region = interior rectangle plus the cordon ring.
    fn in_pn_region(&self, r: u32, c: u32) -> bool {
        let s = &self.spec;
        r + 1 >= s.pn_row0
            && r <= s.pn_row0 + s.pn_rows
            && c + 1 >= s.pn_col0
            && c <= s.pn_col0 + s.pn_cols
    }

    fn node_in_region(&self, n: NodeId) -> bool {
        match self.nodes[n.0 as usize] {
            NodeKind::Grid { row, col } => self.in_pn_region(row, col),
            NodeKind::Terminal { .. } => false,
        }
    }

    fn signal_kind(&self, r: u32, c: u32) -> SignalKind {
        let s = &self.spec;
        if self.in_pn_rect(r, c) {
            return SignalKind::FixedTwoPhase;
        }
        if !self.in_pn_region(r, c) {
            return SignalKind::Unsignalized;
        }
        let top = s.pn_row0 - 1;
        let bottom = s.pn_row0 + s.pn_rows;
        let left = s.pn_col0 - 1;
        let (edge, edge_pos) = if r == top {
            (Edge::North, c - left)
        } else if r == bottom {
            (Edge::South, c - left)
        } else if c == left {
            (Edge::West, r - top - 1)
        } else {
            (Edge::East, r - top - 1)
        };
        SignalKind::Cordon { edge, edge_pos }
    }

    fn push_link(&mut self, from: NodeId, to: NodeId, length_m: f64, bearing: Bearing) -> LinkId {
        let id = LinkId(self.links.len() as u32);
        self.links.push(Link {
            id,
            from,
            to,
            length_m,
            lanes: self.spec.lanes,
            speed_mps: self.spec.speed_mps,
            bearing,
            is_gate: false,
            inside_pn: false,
        });
        id
    }

    fn build(mut self) -> CoreResult<Network> {
        let spec = self.spec.clone();
        let (rows, cols) = (spec.rows, spec.cols);
        for r in 0..rows {
            for c in 0..cols {
                self.nodes.push(NodeKind::Grid { row: r, col: c });
            }
        }
        // Grid links, row-major, east pair then south pair.
        for r in 0..rows {
            for c in 0..cols {
                let here = self.grid_node(r, c);
                if c + 1 < cols {
                    let east = self.grid_node(r, c + 1);
                    self.push_link(here, east, spec.grid_link_m, Bearing::East);
                    self.push_link(east, here, spec.grid_link_m, Bearing::West);
                }
                if r + 1 < rows {
                    let south = self.grid_node(r + 1, c);
                    self.push_link(here, south, spec.grid_link_m, Bearing::South);
                    self.push_link(south, here, spec.grid_link_m, Bearing::North);
                }
            }
        }
        // Boundary stubs: N, E, S, W; inbound then outbound per terminal.
        let sides: [(Bearing, Vec<(u32, u32)>); 4] = [
            (Bearing::North, (0..cols).map(|c| (0, c)).collect()),
            (Bearing::East, (0..rows).map(|r| (r, cols - 1)).collect()),
            (Bearing::South, (0..cols).map(|c| (rows - 1, c)).collect()),
            (Bearing::West, (0..rows).map(|r| (r, 0)).collect()),
        ];
        for (side, cells) in sides {
            for (index, (r, c)) in cells.iter().copied().enumerate() {
                let terminal = NodeId(self.nodes.len() as u32);
                self.nodes.push(NodeKind::Terminal {
                    side,
                    index: index as u32,
                });
                let node = self.grid_node(r, c);
                let inbound =
                    self.push_link(terminal, node, spec.stub_link_m, side.opposite());
                self.push_link(node, terminal, spec.stub_link_m, side);
                if matches!(self.signal_kind(r, c), SignalKind::Cordon { .. }) {
                    self.links[inbound.index()].is_gate = true;
                    self.gate_links.push(inbound);
                }
            }
        }
        // PN membership: both endpoints in the PN region.
        for l in 0..self.links.len() {
            let (from, to) = (self.links[l].from, self.links[l].to);
            self.links[l].inside_pn = self.node_in_region(from) && self.node_in_region(to);
        }
        self.assemble()
    }

    fn assemble(self) -> CoreResult<Network> {
        let spec = self.spec.clone();
        let grid_nodes = (spec.rows * spec.cols) as usize;
        // Incoming/outgoing links per grid node, by side / bearing.
        let mut incoming = alloc::vec![[LinkId(u32::MAX); 4]; grid_nodes];
        let mut outgoing = alloc::vec![[LinkId(u32::MAX); 4]; grid_nodes];
        for l in &self.links {
            if (l.to.0 as usize) < grid_nodes {
                incoming[l.to.0 as usize][l.bearing.opposite().idx()] = l.id;
            }
            if (l.from.0 as usize) < grid_nodes {
                outgoing[l.from.0 as usize][l.bearing.idx()] = l.id;
            }
        }

        let mut movements: Vec<Movement> = Vec::new();
        let mut intersections: Vec<Intersection> = Vec::with_capacity(grid_nodes);
        let mut cordon_by_edge: Vec<(u8, u32, NodeId)> = Vec::new();

        for r in 0..spec.rows {
            for c in 0..spec.cols {
                let node = NodeId(r * spec.cols + c);
                let kind = self.signal_kind(r, c);
                let inc = incoming[node.0 as usize];
                let out = outgoing[node.0 as usize];
                debug_assert!(inc.iter().all(|l| l.0 != u32::MAX));

                let mut local: Vec<MovementId> = Vec::with_capacity(12);
                for side in Bearing::ALL {
                    let from_link = inc[side.idx()];
                    let travel = side.opposite();
                    for turn in [TurnKind::Through, TurnKind::Left, TurnKind::Right] {
                        let to_bearing = match turn {
                            TurnKind::Through => travel,
                            TurnKind::Left => travel.counter_clockwise(),
                            TurnKind::Right => travel.clockwise(),
                        };
                        let to_link = out[to_bearing.idx()];
                        let crossing = match (
                            self.links[from_link.index()].inside_pn,
                            self.links[to_link.index()].inside_pn,
                        ) {
                            (false, true) => Crossing::Inflow,
                            (true, false) => Crossing::Outflow,
                            _ => Crossing::None,
                        };
                        let id = MovementId(movements.len() as u32);
                        movements.push(Movement {
                            id,
                            from_link,
                            to_link,
                            turn,
                            crossing,
                            signal: node,
                            local_idx: local.len() as u8,
                        });
                        local.push(id);
                    }
                }

                let approach_mask = |sides: &[Bearing]| -> u16 {
                    let mut mask = 0u16;
                    for &m in &local {
                        let mv = &movements[m.index()];
                        let approach = self.links[mv.from_link.index()].bearing.opposite();
                        if sides.contains(&approach) {
                            mask |= 1 << mv.local_idx;
                        }
                    }
                    mask
                };

                let phases = match kind {
                    SignalKind::Cordon { edge, .. } => {
                        let outward = edge.outward();
                        let transfer = approach_mask(&[outward, outward.opposite()]);
                        let parallel =
                            approach_mask(&[outward.clockwise(), outward.counter_clockwise()]);
                        let mut gating = 0u16;
                        for &m in &local {
                            let mv = &movements[m.index()];
                            if mv.crossing == Crossing::Outflow {
                                gating |= 1 << mv.local_idx;
                            }
                        }
                        alloc::vec![
                            Phase { green_mask: transfer, is_gating: false },
                            Phase { green_mask: parallel, is_gating: false },
                            Phase { green_mask: gating, is_gating: true },
                        ]
                    }
                    SignalKind::FixedTwoPhase => alloc::vec![
                        Phase {
                            green_mask: approach_mask(&[Bearing::North, Bearing::South]),
                            is_gating: false,
                        },
                        Phase {
                            green_mask: approach_mask(&[Bearing::East, Bearing::West]),
                            is_gating: false,
                        },
                    ],
                    SignalKind::Unsignalized => alloc::vec![Phase {
                        green_mask: approach_mask(&Bearing::ALL),
                        is_gating: false,
                    }],
                };

                if let SignalKind::Cordon { edge, edge_pos } = kind {
                    let edge_rank = match edge {
                        Edge::North => 0u8,
                        Edge::East => 1,
                        Edge::South => 2,
                        Edge::West => 3,
                    };
                    cordon_by_edge.push((edge_rank, edge_pos, node));
                }

                intersections.push(Intersection {
                    node,
                    kind,
                    incoming: inc,
                    outgoing: out,
                    movements: local,
                    phases,
                });
            }
        }

        cordon_by_edge.sort_unstable_by_key(|&(e, p, _)| (e, p));
        let cordon_signals = cordon_by_edge.into_iter().map(|(_, _, n)| n).collect();

        let mut out_movements = alloc::vec![Vec::new(); self.links.len()];
        for m in &movements {
            out_movements[m.from_link.index()].push((m.to_link, m.id));
        }
        for succ in &mut out_movements {
            succ.sort_unstable_by_key(|(to, _)| *to);
        }

        let pn_links = self
            .links
            .iter()
            .filter(|l| l.inside_pn)
            .map(|l| l.id)
            .collect();

        Ok(Network {
            spec,
            links: self.links,
            nodes: self.nodes,
            intersections,
            movements,
            cordon_signals,
            gate_links: self.gate_links,
            pn_links,
            out_movements,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn paper_net() -> Network {
        Network::build_grid(&GridSpec::paper_5x5()).unwrap()
    }

    fn desk_net() -> Network {
        Network::build_grid(&GridSpec::desk_3x3()).unwrap()
    }

    #[test]
    fn paper_grid_has_twenty_gates_on_sixteen_cordon_signals() {
        let net = paper_net();
        assert_eq!(net.gate_links.len(), 20);
        assert_eq!(net.cordon_signals.len(), 16);
        assert_eq!(net.edge_signals(Edge::North).len(), 5);
        assert_eq!(net.edge_signals(Edge::South).len(), 5);
        assert_eq!(net.edge_signals(Edge::East).len(), 3);
        assert_eq!(net.edge_signals(Edge::West).len(), 3);
        // Five gates per boundary side.
        for side in Bearing::ALL {
            let n = net
                .gate_links
                .iter()
                .filter(|&&g| net.gate_side(g) == side)
                .count();
            assert_eq!(n, 5, "side {side:?}");
        }
    }

    #[test]
    fn desk_grid_ring() {
        let net = desk_net();
        assert_eq!(net.cordon_signals.len(), 8);
        assert_eq!(net.gate_links.len(), 12);
        // Interior is the single center intersection.
        let fixed: Vec<_> = net
            .intersections
            .iter()
            .filter(|i| i.kind == SignalKind::FixedTwoPhase)
            .collect();
        assert_eq!(fixed.len(), 1);
        assert_eq!(fixed[0].node, NodeId(4));
    }

    #[test]
    fn every_gate_head_is_a_cordon_signal() {
        for net in [paper_net(), desk_net()] {
            for &g in &net.gate_links {
                let head = net.link(g).to;
                assert!(net.intersection(head).is_cordon());
            }
        }
    }

    #[test]
    fn every_intersection_has_four_incoming_links() {
        for net in [paper_net(), desk_net()] {
            for inter in &net.intersections {
                for leg in inter.incoming {
                    assert!(leg.0 != u32::MAX);
                    assert_eq!(net.link(leg).to, inter.node);
                }
            }
        }
    }

    #[test]
    fn side_cordon_signal_has_three_inflow_three_outflow() {
        let net = paper_net();
        // (0, 1) is a north-edge, non-corner cordon signal.
        let node = NodeId(1);
        let (inflow, outflow) = net.movement_sets(node).unwrap();
        assert_eq!(inflow.len(), 3);
        assert_eq!(outflow.len(), 3);
        // All inflow movements start on the gate leg.
        for m in &inflow {
            assert!(net.link(net.movement(*m).from_link).is_gate);
        }
        // All outflow movements end on the same exit stub.
        let exits: Vec<_> = outflow.iter().map(|&m| net.movement(m).to_link).collect();
        assert!(exits.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn corner_cordon_signal_has_four_and_four() {
        let net = paper_net();
        let (inflow, outflow) = net.movement_sets(NodeId(0)).unwrap();
        assert_eq!(inflow.len(), 4);
        assert_eq!(outflow.len(), 4);
    }

    #[test]
    fn movement_sets_disjoint_on_every_cordon_signal() {
        let net = paper_net();
        for &n in &net.cordon_signals {
            let (inflow, outflow) = net.movement_sets(n).unwrap();
            for m in &inflow {
                assert!(!outflow.contains(m));
            }
        }
    }

    #[test]
    fn movement_sets_rejects_non_cordon_intersections() {
        let net = paper_net();
        // Interior fixed-control intersection.
        let err = net.movement_sets(NodeId(2 * 5 + 2)).unwrap_err();
        assert!(matches!(err, CoreError::Domain(_)));
        // Terminal node.
        let terminal = NodeId(((net.spec.rows * net.spec.cols)));
        assert!(net.movement_sets(terminal).is_err());
    }

    #[test]
    fn gating_phase_green_is_exactly_the_outflow_set() {
        let net = paper_net();
        for &n in &net.cordon_signals {
            let inter = net.intersection(n);
            let gating = inter.gating_phase().unwrap();
            let overlap = net.phase_overlap(n, gating).unwrap();
            let (inflow, outflow) = net.movement_sets(n).unwrap();
            assert_eq!(overlap.out_overlap, outflow);
            assert!(overlap.out_complement.is_empty());
            assert!(overlap.in_overlap.is_empty());
            assert_eq!(overlap.in_complement, inflow);
            // Exactly one gating phase, and nothing but outflow in it.
            assert_eq!(
                inter.phases.iter().filter(|p| p.is_gating).count(),
                1
            );
            for &m in &inter.movements {
                let mv = net.movement(m);
                if inter.phases[gating].grants(mv.local_idx) {
                    assert_eq!(mv.crossing, Crossing::Outflow);
                }
            }
        }
    }

    #[test]
    fn parallel_phase_outflow_overlap_is_turning_only() {
        let net = paper_net();
        let node = NodeId(1);
        let overlap = net.phase_overlap(node, 1).unwrap();
        assert!(!overlap.out_overlap.is_empty());
        for &m in &overlap.out_overlap {
            assert_ne!(net.movement(m).turn, TurnKind::Through);
        }
        // No inflow movement is green in the parallel phase.
        assert!(overlap.in_overlap.is_empty());
    }

    #[test]
    fn phase_overlap_is_an_exact_partition_everywhere() {
        let net = paper_net();
        for &n in &net.cordon_signals {
            let (inflow, outflow) = net.movement_sets(n).unwrap();
            for p in 0..net.intersection(n).phases.len() {
                let o = net.phase_overlap(n, p).unwrap();
                let mut out_all = o.out_overlap.clone();
                out_all.extend_from_slice(&o.out_complement);
                out_all.sort_unstable();
                assert_eq!(out_all, outflow);
                let mut in_all = o.in_overlap.clone();
                in_all.extend_from_slice(&o.in_complement);
                in_all.sort_unstable();
                assert_eq!(in_all, inflow);
            }
        }
    }

    #[test]
    fn storage_capacity_matches_footprint_arithmetic() {
        let net = paper_net();
        let pn_link = net.pn_links[0];
        assert_eq!(net.storage(pn_link), 80); // 300 m x 2 lanes / 7.5 m
        let gate = net.gate_links[0];
        assert_eq!(net.storage(gate), 266); // 1000 m x 2 lanes / 7.5 m
        assert!((net.occupancy(pn_link, 40) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn pn_links_form_a_connected_subgraph() {
        let net = paper_net();
        let pn: Vec<LinkId> = net.pn_links.clone();
        assert!(!pn.is_empty());
        let mut seen = alloc::collections::BTreeSet::new();
        let mut stack = alloc::vec![pn[0]];
        seen.insert(pn[0]);
        while let Some(l) = stack.pop() {
            for &(to, _) in net.successors(l) {
                if net.link(to).inside_pn && seen.insert(to) {
                    stack.push(to);
                }
            }
        }
        assert_eq!(seen.len(), pn.len());
    }

    #[test]
    fn pn_rect_touching_boundary_is_rejected() {
        let mut spec = GridSpec::paper_5x5();
        spec.pn_row0 = 0;
        assert!(matches!(
            Network::build_grid(&spec),
            Err(CoreError::Geometry(_))
        ));
        let mut spec = GridSpec::paper_5x5();
        spec.pn_cols = 4; // extends to column 4 = boundary
        assert!(Network::build_grid(&spec).is_err());
    }

    #[test]
    fn build_is_deterministic() {
        let a = paper_net().to_text();
        let b = paper_net().to_text();
        assert_eq!(a, b);
    }

    #[test]
    fn referenced_links_exist() {
        let net = paper_net();
        for m in &net.movements {
            assert!(m.from_link.index() < net.links.len());
            assert!(m.to_link.index() < net.links.len());
        }
    }

    #[test]
    fn edge_neighbors_follow_edge_order() {
        let net = paper_net();
        let north = net.edge_signals(Edge::North);
        assert_eq!(net.edge_neighbors(north[0]), [None, Some(north[1])]);
        assert_eq!(
            net.edge_neighbors(north[2]),
            [Some(north[1]), Some(north[3])]
        );
        let last = north[north.len() - 1];
        assert_eq!(net.edge_neighbors(last)[1], None);
    }

    #[test]
    fn opposite_exit_crosses_the_grid() {
        let net = paper_net();
        for &g in &net.gate_links {
            let exit = net.opposite_exit(g);
            assert_eq!(net.link(exit).bearing, net.link(g).bearing);
            assert!(!net.link(exit).is_gate);
            let twin = net.twin_exit(g);
            assert_ne!(exit, twin);
            assert_eq!(net.link(twin).from, net.link(g).to);
        }
    }

    #[test]
    fn gate_through_target_is_a_pn_link() {
        let net = paper_net();
        for &g in &net.gate_links {
            let t = net.gate_through_target(g);
            assert!(net.link(t).inside_pn);
            assert!(net.find_movement(g, t).is_some());
        }
    }
}
