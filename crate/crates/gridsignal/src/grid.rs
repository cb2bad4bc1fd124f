//! Static 3x3 grid topology, movement semantics, the eight-phase catalogue,
//! the pairwise conflict model, and the clearance state machine.
//!
//! Conventions used throughout the crate:
//! - Intersections are indexed row-major, `idx = row * 3 + col`, with row 0
//!   on the north side and col 0 on the west side.
//! - A directed edge's `heading` is the compass direction of travel.
//! - A movement's `approach` is the side the traffic comes *from*, so an
//!   edge heading south arrives at its intersection on the N approach.
//! - Outer (boundary) edges are identified by side and position:
//!   `N0..N2, E0..E2, S0..S2, W0..W2`. Each has one inbound and one
//!   outbound directed half-edge.

use serde::Serialize;
use thiserror::Error;

/// Seconds of yellow/all-red inserted on every phase change.
pub const CLEARANCE_SECONDS: u8 = 5;

/// Number of signalized intersections.
pub const NUM_INTERSECTIONS: usize = 9;

/// Number of outer (boundary) edges, used as demand origins/destinations.
pub const NUM_OUTER_EDGES: usize = 12;

/// Number of catalogue phases.
pub const NUM_PHASES: usize = 8;

/// Canonical outer-edge identifiers in index order.
pub const OUTER_EDGE_IDS: [&str; NUM_OUTER_EDGES] = [
    "N0", "N1", "N2", "E0", "E1", "E2", "S0", "S1", "S2", "W0", "W1", "W2",
];

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("unsupported topology: {rows}x{cols} grid requested, only 3x3 is supported")]
    UnsupportedTopology { rows: usize, cols: usize },
    #[error("unsupported lane count {0}, only 4 lanes per direction is supported")]
    UnsupportedLanes(usize),
    #[error("invalid phase index {0}, phases are 0..8")]
    InvalidPhase(usize),
}

/// Compass direction of travel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Dir {
    N,
    E,
    S,
    W,
}

impl Dir {
    pub const ALL: [Dir; 4] = [Dir::N, Dir::E, Dir::S, Dir::W];

    pub fn opposite(self) -> Dir {
        match self {
            Dir::N => Dir::S,
            Dir::E => Dir::W,
            Dir::S => Dir::N,
            Dir::W => Dir::E,
        }
    }

    /// Direction after a right turn (clockwise).
    pub fn right(self) -> Dir {
        match self {
            Dir::N => Dir::E,
            Dir::E => Dir::S,
            Dir::S => Dir::W,
            Dir::W => Dir::N,
        }
    }

    /// Direction after a left turn (counter-clockwise).
    pub fn left(self) -> Dir {
        self.right().opposite()
    }

    /// Rank used for movement and observation ordering: N, S, E, W.
    pub fn approach_rank(self) -> usize {
        match self {
            Dir::N => 0,
            Dir::S => 1,
            Dir::E => 2,
            Dir::W => 3,
        }
    }

    pub fn from_approach_rank(rank: usize) -> Dir {
        [Dir::N, Dir::S, Dir::E, Dir::W][rank]
    }

    pub fn label(self) -> &'static str {
        match self {
            Dir::N => "N",
            Dir::E => "E",
            Dir::S => "S",
            Dir::W => "W",
        }
    }
}

/// Aggregated lane class at an approach: lanes 0-1 serve straight/right,
/// lanes 2-3 serve left and U-turns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum MovementClass {
    SR,
    LT,
}

impl MovementClass {
    /// Physical lane indices aggregated into this class.
    pub fn lanes(self) -> [usize; 2] {
        match self {
            MovementClass::SR => [0, 1],
            MovementClass::LT => [2, 3],
        }
    }
}

/// One of the eight aggregated traffic streams at an intersection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct Movement {
    pub approach: Dir,
    pub class: MovementClass,
}

impl Movement {
    pub fn new(approach: Dir, class: MovementClass) -> Movement {
        Movement { approach, class }
    }

    /// Stable index 0..8: approaches ordered N, S, E, W, SR before LT.
    pub fn index(self) -> usize {
        self.approach.approach_rank() * 2 + if self.class == MovementClass::SR { 0 } else { 1 }
    }

    pub fn from_index(idx: usize) -> Movement {
        Movement {
            approach: Dir::from_approach_rank(idx / 2),
            class: if idx % 2 == 0 {
                MovementClass::SR
            } else {
                MovementClass::LT
            },
        }
    }

    /// All eight movements in index order.
    pub fn all() -> impl Iterator<Item = Movement> {
        (0..8).map(Movement::from_index)
    }

    /// Classify the movement a vehicle performs when it arrives heading
    /// `heading_in` and departs heading `heading_out`. Straight and right
    /// turns are SR; left and U-turns are LT.
    pub fn classify(heading_in: Dir, heading_out: Dir) -> Movement {
        let class = if heading_out == heading_in || heading_out == heading_in.right() {
            MovementClass::SR
        } else {
            MovementClass::LT
        };
        Movement {
            approach: heading_in.opposite(),
            class,
        }
    }
}

/// Set of movements, packed as a bitmask over `Movement::index`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct MovementSet(pub u8);

impl MovementSet {
    pub const EMPTY: MovementSet = MovementSet(0);

    pub fn of(movements: &[Movement]) -> MovementSet {
        let mut mask = 0u8;
        for m in movements {
            mask |= 1 << m.index();
        }
        MovementSet(mask)
    }

    pub fn contains(self, m: Movement) -> bool {
        self.0 & (1 << m.index()) != 0
    }

    pub fn intersect(self, other: MovementSet) -> MovementSet {
        MovementSet(self.0 & other.0)
    }

    pub fn is_subset_of(self, other: MovementSet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = Movement> {
        (0..8).filter(move |i| self.0 & (1 << i) != 0).map(Movement::from_index)
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }
}

/// Returns true when simultaneous green for both movements would cross
/// paths under right-hand-traffic geometry: perpendicular approaches always
/// conflict, opposing approaches conflict only when the classes differ
/// (a through stream against an opposing protected left), and movements
/// from the same approach never conflict.
pub fn movements_conflict(a: Movement, b: Movement) -> bool {
    if a.approach == b.approach {
        false
    } else if a.approach == b.approach.opposite() {
        a.class != b.class
    } else {
        true
    }
}

/// One of the eight catalogue phases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Phase {
    pub index: usize,
    pub green_set: MovementSet,
}

/// The fixed eight-phase catalogue: paired through movements, paired
/// protected lefts, and the four single-approach phases.
pub fn phase(index: usize) -> Result<Phase, GridError> {
    use Dir::*;
    use MovementClass::*;
    let green = |a: Dir, ca: MovementClass, b: Dir, cb: MovementClass| {
        MovementSet::of(&[Movement::new(a, ca), Movement::new(b, cb)])
    };
    let set = match index {
        0 => green(N, SR, S, SR),
        1 => green(E, SR, W, SR),
        2 => green(N, LT, S, LT),
        3 => green(E, LT, W, LT),
        4 => green(N, SR, N, LT),
        5 => green(S, SR, S, LT),
        6 => green(E, SR, E, LT),
        7 => green(W, SR, W, LT),
        _ => return Err(GridError::InvalidPhase(index)),
    };
    Ok(Phase {
        index,
        green_set: set,
    })
}

/// Green set of a valid phase index; panics on out-of-range input.
pub fn phase_green(index: usize) -> MovementSet {
    phase(index).expect("valid phase index").green_set
}

/// Per-intersection signal controller state.
///
/// During a clearance only the carryover movements (green in both the old
/// and the new phase) keep green. A phase change is a commitment: requests
/// arriving while the clearance runs are ignored, so every switch gets its
/// full 5 s of protection and per-second stochastic controllers can
/// complete switches without re-affirming them.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SignalState {
    pub current_phase: usize,
    pub time_since_change: u32,
    pub clearance_remaining: u8,
    pub pending_phase: Option<usize>,
    pub carryover: MovementSet,
}

impl Default for SignalState {
    fn default() -> Self {
        SignalState::new(0)
    }
}

impl SignalState {
    pub fn new(initial_phase: usize) -> SignalState {
        SignalState {
            current_phase: initial_phase,
            time_since_change: 0,
            clearance_remaining: 0,
            pending_phase: None,
            carryover: MovementSet::EMPTY,
        }
    }

    pub fn in_clearance(&self) -> bool {
        self.clearance_remaining > 0
    }

    /// Movements with green right now.
    pub fn effective_green(&self) -> MovementSet {
        if self.in_clearance() {
            self.carryover
        } else {
            phase_green(self.current_phase)
        }
    }

    /// Request a phase. No-op when the phase is already active or while a
    /// clearance is running; otherwise starts the 5 s clearance toward the
    /// requested phase.
    pub fn request_phase(&mut self, new_phase: usize) -> Result<(), GridError> {
        if new_phase >= NUM_PHASES {
            return Err(GridError::InvalidPhase(new_phase));
        }
        if !self.in_clearance() && new_phase != self.current_phase {
            self.carryover =
                phase_green(self.current_phase).intersect(phase_green(new_phase));
            self.pending_phase = Some(new_phase);
            self.clearance_remaining = CLEARANCE_SECONDS;
        }
        Ok(())
    }

    /// Advance the controller by one second.
    pub fn tick(&mut self) {
        if self.in_clearance() {
            self.clearance_remaining -= 1;
            if self.clearance_remaining == 0 {
                self.current_phase = self.pending_phase.take().expect("pending set in clearance");
                self.carryover = MovementSet::EMPTY;
                self.time_since_change = 0;
            } else {
                self.time_since_change += 1;
            }
        } else {
            self.time_since_change += 1;
        }
    }
}

/// Build parameters for the grid network.
#[derive(Debug, Clone, Serialize)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    pub link_length: f64,
    pub lanes_per_direction: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            rows: 3,
            cols: 3,
            link_length: 100.0,
            lanes_per_direction: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum NodeKind {
    Intersection { row: usize, col: usize },
    Terminal { outer: usize },
}

#[derive(Debug, Clone, Serialize)]
pub struct Node {
    pub index: usize,
    pub kind: NodeKind,
    pub name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum EdgeKind {
    Internal,
    BoundaryIn,
    BoundaryOut,
}

/// A directed roadway segment with `lanes` parallel lanes.
#[derive(Debug, Clone, Serialize)]
pub struct Edge {
    pub index: usize,
    pub from: usize,
    pub to: usize,
    pub heading: Dir,
    pub length: f64,
    pub lanes: usize,
    pub kind: EdgeKind,
    pub name: String,
}

/// One boundary location with its inbound and outbound directed half-edges.
#[derive(Debug, Clone, Serialize)]
pub struct OuterEdge {
    pub index: usize,
    pub id: &'static str,
    pub terminal_node: usize,
    pub in_edge: usize,
    pub out_edge: usize,
}

/// The built network: nodes, directed edges, and per-intersection lookups.
#[derive(Debug, Clone)]
pub struct Network {
    pub spec: GridSpec,
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
    pub outer_edges: Vec<OuterEdge>,
    /// incoming[i][approach_rank] = edge arriving at intersection i from that side.
    pub incoming: [[usize; 4]; NUM_INTERSECTIONS],
    /// outgoing[i][approach_rank of heading? no: heading rank N,S,E,W] = edge leaving i with that heading.
    outgoing: [[Option<usize>; 4]; NUM_INTERSECTIONS],
}

/// Build the 3x3 signalized grid network.
pub fn build_grid(spec: &GridSpec) -> Result<Network, GridError> {
    if spec.rows != 3 || spec.cols != 3 {
        return Err(GridError::UnsupportedTopology {
            rows: spec.rows,
            cols: spec.cols,
        });
    }
    if spec.lanes_per_direction != 4 {
        return Err(GridError::UnsupportedLanes(spec.lanes_per_direction));
    }

    let mut nodes = Vec::new();
    for row in 0..3 {
        for col in 0..3 {
            nodes.push(Node {
                index: nodes.len(),
                kind: NodeKind::Intersection { row, col },
                name: format!("n{}{}", row, col),
            });
        }
    }
    for (outer, id) in OUTER_EDGE_IDS.iter().enumerate() {
        nodes.push(Node {
            index: nodes.len(),
            kind: NodeKind::Terminal { outer },
            name: id.to_string(),
        });
    }

    let inter = |row: usize, col: usize| row * 3 + col;
    // Terminal node adjacent to each outer edge, and the heading of its
    // inbound half-edge.
    let terminal_info = |outer: usize| -> (usize, Dir) {
        let pos = outer % 3;
        match outer / 3 {
            0 => (inter(0, pos), Dir::S), // north side, traffic enters heading south
            1 => (inter(pos, 2), Dir::W), // east side
            2 => (inter(2, pos), Dir::N), // south side
            3 => (inter(pos, 0), Dir::E), // west side
            _ => unreachable!(),
        }
    };

    let mut edges: Vec<Edge> = Vec::new();
    let push_edge = |edges: &mut Vec<Edge>,
                         nodes: &[Node],
                         from: usize,
                         to: usize,
                         heading: Dir,
                         kind: EdgeKind,
                         length: f64| {
        let index = edges.len();
        edges.push(Edge {
            index,
            from,
            to,
            heading,
            length,
            lanes: spec.lanes_per_direction,
            kind,
            name: format!("{}->{}", nodes[from].name, nodes[to].name),
        });
        index
    };

    // Internal links, row-major: east-west neighbours first, then north-south.
    for row in 0..3 {
        for col in 0..2 {
            let a = inter(row, col);
            let b = inter(row, col + 1);
            push_edge(&mut edges, &nodes, a, b, Dir::E, EdgeKind::Internal, spec.link_length);
            push_edge(&mut edges, &nodes, b, a, Dir::W, EdgeKind::Internal, spec.link_length);
        }
    }
    for row in 0..2 {
        for col in 0..3 {
            let a = inter(row, col);
            let b = inter(row + 1, col);
            push_edge(&mut edges, &nodes, a, b, Dir::S, EdgeKind::Internal, spec.link_length);
            push_edge(&mut edges, &nodes, b, a, Dir::N, EdgeKind::Internal, spec.link_length);
        }
    }

    let mut outer_edges = Vec::new();
    for (outer, id) in OUTER_EDGE_IDS.iter().enumerate() {
        let terminal = 9 + outer;
        let (adj, in_heading) = terminal_info(outer);
        let in_edge = push_edge(
            &mut edges,
            &nodes,
            terminal,
            adj,
            in_heading,
            EdgeKind::BoundaryIn,
            spec.link_length,
        );
        let out_edge = push_edge(
            &mut edges,
            &nodes,
            adj,
            terminal,
            in_heading.opposite(),
            EdgeKind::BoundaryOut,
            spec.link_length,
        );
        outer_edges.push(OuterEdge {
            index: outer,
            id,
            terminal_node: terminal,
            in_edge,
            out_edge,
        });
    }

    let mut incoming = [[usize::MAX; 4]; NUM_INTERSECTIONS];
    let mut outgoing = [[None; 4]; NUM_INTERSECTIONS];
    for edge in &edges {
        if edge.to < NUM_INTERSECTIONS {
            incoming[edge.to][edge.heading.opposite().approach_rank()] = edge.index;
        }
        if edge.from < NUM_INTERSECTIONS {
            outgoing[edge.from][edge.heading.approach_rank()] = Some(edge.index);
        }
    }
    debug_assert!(incoming.iter().all(|row| row.iter().all(|&e| e != usize::MAX)));

    Ok(Network {
        spec: spec.clone(),
        nodes,
        edges,
        outer_edges,
        incoming,
        outgoing,
    })
}

impl Network {
    pub fn num_intersections(&self) -> usize {
        NUM_INTERSECTIONS
    }

    /// Directed edge leaving intersection `i` with the given heading.
    pub fn outgoing_edge(&self, i: usize, heading: Dir) -> Option<usize> {
        self.outgoing[i][heading.approach_rank()]
    }

    /// All directed edges leaving the end node of `edge` (empty at terminals).
    pub fn successors(&self, edge: usize) -> Vec<usize> {
        let to = self.edges[edge].to;
        if to >= NUM_INTERSECTIONS {
            return Vec::new();
        }
        Dir::ALL
            .iter()
            .filter_map(|&d| self.outgoing[to][d.approach_rank()])
            .collect()
    }

    /// Movement a vehicle performs when passing from `edge_in` to `edge_out`
    /// through the intersection at which `edge_in` ends.
    pub fn movement_between(&self, edge_in: usize, edge_out: usize) -> Movement {
        debug_assert_eq!(self.edges[edge_in].to, self.edges[edge_out].from);
        Movement::classify(self.edges[edge_in].heading, self.edges[edge_out].heading)
    }

    /// Intersection at which this edge ends, if any.
    pub fn edge_end_intersection(&self, edge: usize) -> Option<usize> {
        let to = self.edges[edge].to;
        (to < NUM_INTERSECTIONS).then_some(to)
    }

    /// Count of directed boundary half-edges (inbound plus outbound).
    pub fn boundary_half_edges(&self) -> usize {
        self.edges
            .iter()
            .filter(|e| e.kind != EdgeKind::Internal)
            .count()
    }

    /// JSON document describing nodes, edges, and lane metadata.
    pub fn topology_json(&self) -> serde_json::Value {
        serde_json::json!({
            "spec": self.spec,
            "nodes": self.nodes,
            "edges": self.edges,
            "outer_edges": self.outer_edges,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent geometric classification of a pair of approaches,
    /// used to cross-check `movements_conflict` over all pairs.
    fn approaches_relation(a: Dir, b: Dir) -> &'static str {
        if a == b {
            "same"
        } else if a == b.opposite() {
            "opposing"
        } else {
            "perpendicular"
        }
    }

    #[test]
    fn default_grid_has_expected_shape() {
        let net = build_grid(&GridSpec::default()).unwrap();
        assert_eq!(net.num_intersections(), 9);
        assert_eq!(net.outer_edges.len(), 12);
        assert_eq!(net.boundary_half_edges(), 24);
        let origins = net
            .edges
            .iter()
            .filter(|e| e.kind == EdgeKind::BoundaryIn)
            .count();
        assert_eq!(origins, 12);
        // 12 internal bidirectional links plus 12 boundary links.
        assert_eq!(net.edges.len(), 24 + 24);
        for e in &net.edges {
            assert_eq!(e.length, 100.0);
            assert_eq!(e.lanes, 4);
        }
    }

    #[test]
    fn rejects_non_3x3() {
        let spec = GridSpec {
            rows: 4,
            ..GridSpec::default()
        };
        assert_eq!(
            build_grid(&spec).unwrap_err(),
            GridError::UnsupportedTopology { rows: 4, cols: 3 }
        );
    }

    #[test]
    fn link_length_passes_through() {
        let spec = GridSpec {
            link_length: 150.0,
            ..GridSpec::default()
        };
        let net = build_grid(&spec).unwrap();
        assert!(net
            .edges
            .iter()
            .filter(|e| e.kind == EdgeKind::Internal)
            .all(|e| e.length == 150.0));
    }

    #[test]
    fn edge_ids_stable_and_deterministic() {
        let a = build_grid(&GridSpec::default()).unwrap();
        let b = build_grid(&GridSpec::default()).unwrap();
        for (ea, eb) in a.edges.iter().zip(b.edges.iter()) {
            assert_eq!(ea.name, eb.name);
            assert_eq!(ea.index, eb.index);
        }
        assert_eq!(a.edges[0].name, "n00->n01");
    }

    #[test]
    fn every_intersection_has_four_approaches() {
        let net = build_grid(&GridSpec::default()).unwrap();
        for i in 0..9 {
            for rank in 0..4 {
                let e = net.incoming[i][rank];
                assert_eq!(net.edges[e].to, i);
                assert_eq!(net.edges[e].heading.opposite().approach_rank(), rank);
            }
        }
    }

    #[test]
    fn conflict_matrix_matches_spec_examples() {
        use Dir::*;
        use MovementClass::*;
        let m = Movement::new;
        assert!(!movements_conflict(m(N, SR), m(S, SR)));
        assert!(!movements_conflict(m(N, SR), m(N, SR)));
        assert!(movements_conflict(m(N, SR), m(E, SR)));
    }

    #[test]
    fn conflict_matrix_symmetric_and_certifies_catalogue() {
        // Geometric enumeration over all 28 unordered pairs: the relation of
        // the two approaches fully determines the verdict under the
        // right-hand-traffic model.
        for a in Movement::all() {
            for b in Movement::all() {
                let got = movements_conflict(a, b);
                assert_eq!(got, movements_conflict(b, a), "symmetry {a:?} {b:?}");
                let expected = match approaches_relation(a.approach, b.approach) {
                    "same" => false,
                    "opposing" => a.class != b.class,
                    _ => true,
                };
                assert_eq!(got, expected, "{a:?} vs {b:?}");
            }
        }
        for p in 0..NUM_PHASES {
            let greens: Vec<Movement> = phase_green(p).iter().collect();
            assert_eq!(greens.len(), 2);
            for a in &greens {
                for b in &greens {
                    assert!(!movements_conflict(*a, *b), "phase {p} not conflict-free");
                }
            }
        }
    }

    #[test]
    fn phase_catalogue_matches_listing() {
        use Dir::*;
        use MovementClass::*;
        let m = Movement::new;
        let expect = [
            vec![m(N, SR), m(S, SR)],
            vec![m(E, SR), m(W, SR)],
            vec![m(N, LT), m(S, LT)],
            vec![m(E, LT), m(W, LT)],
            vec![m(N, SR), m(N, LT)],
            vec![m(S, SR), m(S, LT)],
            vec![m(E, SR), m(E, LT)],
            vec![m(W, SR), m(W, LT)],
        ];
        for (i, greens) in expect.iter().enumerate() {
            assert_eq!(phase_green(i), MovementSet::of(greens));
        }
        assert!(phase(8).is_err());
    }

    #[test]
    fn request_same_phase_is_noop() {
        let mut s = SignalState::new(0);
        s.time_since_change = 7;
        s.request_phase(0).unwrap();
        assert!(!s.in_clearance());
        s.tick();
        assert_eq!(s.time_since_change, 8);
        assert_eq!(s.current_phase, 0);
    }

    #[test]
    fn disjoint_switch_has_empty_carryover() {
        let mut s = SignalState::new(0);
        s.request_phase(1).unwrap();
        assert_eq!(s.clearance_remaining, 5);
        assert!(s.carryover.is_empty());
        assert_eq!(s.effective_green(), MovementSet::EMPTY);
    }

    #[test]
    fn overlapping_switch_carries_shared_movement() {
        let mut s = SignalState::new(0);
        s.request_phase(4).unwrap();
        let shared = phase_green(0).intersect(phase_green(4));
        assert_eq!(s.carryover, shared);
        assert_eq!(shared.len(), 1);
        assert!(shared.contains(Movement::new(Dir::N, MovementClass::SR)));
    }

    #[test]
    fn five_ticks_complete_a_switch() {
        let mut s = SignalState::new(0);
        s.request_phase(3).unwrap();
        // Walk the 5-step clearance by hand.
        for remaining in (1..=5).rev() {
            assert_eq!(s.clearance_remaining, remaining);
            assert_eq!(s.effective_green(), s.carryover);
            s.tick();
        }
        assert_eq!(s.current_phase, 3);
        assert_eq!(s.time_since_change, 0);
        assert!(!s.in_clearance());
    }

    #[test]
    fn clearance_is_a_commitment() {
        // p -> q: requests during the clearance are ignored, the envelope
        // green(p) n green(q) holds for all 5 seconds, and q activates.
        let mut s = SignalState::new(0);
        s.request_phase(4).unwrap();
        let envelope = phase_green(0).intersect(phase_green(4));
        s.tick();
        assert!(s.effective_green().is_subset_of(envelope));
        s.request_phase(1).unwrap();
        assert_eq!(s.pending_phase, Some(4), "mid-clearance requests are ignored");
        assert_eq!(s.clearance_remaining, 4);
        for _ in 0..4 {
            assert!(s.effective_green().is_subset_of(envelope));
            s.tick();
        }
        assert_eq!(s.current_phase, 4);
    }

    #[test]
    fn noisy_requests_do_not_stall_a_switch() {
        let mut s = SignalState::new(0);
        s.request_phase(6).unwrap();
        // A controller spamming other phases during the clearance cannot
        // delay or divert the committed switch.
        for other in [0usize, 3, 1, 5, 2] {
            s.request_phase(other).unwrap();
            s.tick();
        }
        assert_eq!(s.current_phase, 6);
        assert!(!s.in_clearance());
    }

    #[test]
    fn invalid_phase_rejected() {
        let mut s = SignalState::new(0);
        assert_eq!(s.request_phase(8).unwrap_err(), GridError::InvalidPhase(8));
    }

    #[test]
    fn effective_greens_always_conflict_free() {
        // Randomized requests: at every second the effective green set is
        // pairwise conflict-free.
        let mut s = SignalState::new(0);
        let mut x = 0x243f6a8885a308d3u64;
        for _ in 0..2000 {
            x ^= x << 13;
            x ^= x >> 7;
            x ^= x << 17;
            s.request_phase((x % 8) as usize).unwrap();
            s.tick();
            let greens: Vec<Movement> = s.effective_green().iter().collect();
            for a in &greens {
                for b in &greens {
                    assert!(!movements_conflict(*a, *b));
                }
            }
        }
    }

    #[test]
    fn topology_json_has_nodes_and_edges() {
        let net = build_grid(&GridSpec::default()).unwrap();
        let doc = net.topology_json();
        assert_eq!(doc["nodes"].as_array().unwrap().len(), 21);
        assert_eq!(doc["edges"].as_array().unwrap().len(), 48);
    }
}
