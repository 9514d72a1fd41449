//! Circular doubly-linked list over slot indices ordered by last access.
//!
//! The head is the least recently accessed slot and `prev[head]` the most
//! recent. Touching a slot moves it to the back in O(1); each move returns a
//! [`RingMove`] that restores the previous order when undone newest first.

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UsageRing {
    prev: Vec<u32>,
    next: Vec<u32>,
    head: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RingMove {
    slot: u32,
    old_prev: u32,
    old_next: u32,
    old_head: u32,
    kind: MoveKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum MoveKind {
    /// Slot was already at the back.
    Noop,
    /// Slot was the head; the head advanced.
    Rotate,
    Relink,
}

impl UsageRing {
    /// Ring over `0..n` with slot 0 at the head.
    pub fn new(n: usize) -> Self {
        assert!(n > 0 && n < u32::MAX as usize);
        let n32 = n as u32;
        UsageRing {
            prev: (0..n32).map(|i| (i + n32 - 1) % n32).collect(),
            next: (0..n32).map(|i| (i + 1) % n32).collect(),
            head: 0,
        }
    }

    /// Rebuilds a ring from an explicit order, head first.
    pub fn from_order(order: &[usize]) -> Option<Self> {
        let n = order.len();
        if n == 0 {
            return None;
        }
        let mut seen = vec![false; n];
        for &s in order {
            if s >= n || seen[s] {
                return None;
            }
            seen[s] = true;
        }
        let mut prev = vec![0u32; n];
        let mut next = vec![0u32; n];
        for k in 0..n {
            let s = order[k];
            next[s] = order[(k + 1) % n] as u32;
            prev[s] = order[(k + n - 1) % n] as u32;
        }
        Some(UsageRing {
            prev,
            next,
            head: order[0] as u32,
        })
    }

    pub fn len(&self) -> usize {
        self.next.len()
    }

    pub fn is_empty(&self) -> bool {
        self.next.is_empty()
    }

    /// Least recently accessed slot.
    #[inline]
    pub fn head(&self) -> usize {
        self.head as usize
    }

    /// Slots from least to most recently accessed.
    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        let mut cur = self.head;
        (0..self.len()).map(move |_| {
            let s = cur;
            cur = self.next[cur as usize];
            s as usize
        })
    }

    /// Marks `slot` as most recently accessed.
    pub fn touch(&mut self, slot: usize) -> RingMove {
        let s = slot as u32;
        let mut mv = RingMove {
            slot: s,
            old_prev: self.prev[slot],
            old_next: self.next[slot],
            old_head: self.head,
            kind: MoveKind::Noop,
        };
        if self.len() == 1 {
            return mv;
        }
        if s == self.head {
            self.head = self.next[slot];
            mv.kind = MoveKind::Rotate;
        } else if s != self.prev[self.head as usize] {
            let (p, n) = (self.prev[slot], self.next[slot]);
            self.next[p as usize] = n;
            self.prev[n as usize] = p;
            let tail = self.prev[self.head as usize];
            self.next[tail as usize] = s;
            self.prev[slot] = tail;
            self.next[slot] = self.head;
            self.prev[self.head as usize] = s;
            mv.kind = MoveKind::Relink;
        }
        mv
    }

    pub fn undo(&mut self, mv: RingMove) {
        match mv.kind {
            MoveKind::Noop => {}
            MoveKind::Rotate => self.head = mv.old_head,
            MoveKind::Relink => {
                let slot = mv.slot as usize;
                let (p, n) = (self.prev[slot], self.next[slot]);
                self.next[p as usize] = n;
                self.prev[n as usize] = p;
                self.prev[slot] = mv.old_prev;
                self.next[slot] = mv.old_next;
                self.next[mv.old_prev as usize] = mv.slot;
                self.prev[mv.old_next as usize] = mv.slot;
                self.head = mv.old_head;
            }
        }
    }

    /// Each slot appears exactly once and the links are mutually consistent.
    pub fn is_consistent(&self) -> bool {
        let n = self.len();
        let mut seen = vec![false; n];
        let mut cur = self.head as usize;
        for _ in 0..n {
            if seen[cur] || self.prev[self.next[cur] as usize] as usize != cur {
                return false;
            }
            seen[cur] = true;
            cur = self.next[cur] as usize;
        }
        cur == self.head as usize && seen.iter().all(|&s| s)
    }
}
