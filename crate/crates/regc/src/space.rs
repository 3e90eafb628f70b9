//! The global shared address space: pages, allocation, and the memory
//! servers the pages are strided across.
//!
//! Servers are reliable and apply each write message atomically, in
//! delivery order. Ordinary write-backs carry a dirty-byte mask so that
//! two processors flushing disjoint words of the same page never clobber
//! each other; the wire size of a write-back is still accounted as a full
//! page by the caller.

use std::collections::BTreeMap;

use crate::config::SimConfig;
use crate::error::{SimError, SimResult};

/// A byte offset into the global shared address space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GlobalAddr(pub u64);

/// Index of a fixed-size page of the global address space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PageId(pub u64);

/// A page-aligned region handed out by the resource manager.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Allocation {
    pub base: GlobalAddr,
    pub length: u64,
}

impl Allocation {
    pub fn addr(&self, offset: u64) -> GlobalAddr {
        GlobalAddr(self.base.0 + offset)
    }

    /// Address of 8-byte word `index` within the allocation.
    pub fn word(&self, index: u64) -> GlobalAddr {
        GlobalAddr(self.base.0 + index * 8)
    }
}

/// Returns the page containing `addr`.
pub fn page_of(addr: GlobalAddr, cfg: &SimConfig) -> SimResult<PageId> {
    if addr.0 >= cfg.total_size_bytes {
        return Err(SimError::OutOfBounds {
            addr: addr.0,
            len: 0,
            size: cfg.total_size_bytes,
        });
    }
    Ok(PageId(addr.0 / cfg.page_size_bytes))
}

/// Home server for a page: pages are strided round-robin by index.
pub fn server_of(page: PageId, server_count: u64) -> u64 {
    debug_assert!(server_count >= 1);
    page.0 % server_count
}

/// One simulated memory server. Holds the authoritative copy of every page
/// strided onto it; absent pages read as zero.
#[derive(Debug, Clone)]
pub struct MemoryServer {
    pub id: u64,
    store: BTreeMap<PageId, Vec<u8>>,
}

impl MemoryServer {
    pub fn new(id: u64) -> Self {
        Self {
            id,
            store: BTreeMap::new(),
        }
    }

    /// Authoritative page contents (zeroes if never written).
    pub fn read(&self, page: PageId, page_size: u64) -> Vec<u8> {
        self.store
            .get(&page)
            .cloned()
            .unwrap_or_else(|| vec![0; page_size as usize])
    }

    /// Replaces the bytes covered by `ranges` (page-relative offsets) with
    /// the corresponding bytes of `image`, atomically.
    pub fn merge(&mut self, page: PageId, image: &[u8], ranges: &[(u64, u64)]) {
        let entry = self
            .store
            .entry(page)
            .or_insert_with(|| vec![0; image.len()]);
        debug_assert_eq!(entry.len(), image.len());
        for &(start, len) in ranges {
            let (s, e) = (start as usize, (start + len) as usize);
            entry[s..e].copy_from_slice(&image[s..e]);
        }
    }

    /// Patches an individual byte range (used by fine-grain diff writes).
    pub fn patch(&mut self, page: PageId, offset_in_page: u64, bytes: &[u8], page_size: u64) {
        let entry = self
            .store
            .entry(page)
            .or_insert_with(|| vec![0; page_size as usize]);
        let s = offset_in_page as usize;
        entry[s..s + bytes.len()].copy_from_slice(bytes);
    }

    pub fn pages(&self) -> impl Iterator<Item = PageId> + '_ {
        self.store.keys().copied()
    }
}

/// Page-aligned bump allocator over the global address space. There is no
/// free(): the benchmarks never release memory and a bump pointer keeps
/// allocation out of the experiment's variance.
#[derive(Debug, Clone)]
pub struct Allocator {
    next_page: u64,
    total_pages: u64,
    page_size: u64,
    live: Vec<Allocation>,
}

impl Allocator {
    pub fn new(cfg: &SimConfig) -> Self {
        Self {
            next_page: 0,
            total_pages: cfg.total_pages(),
            page_size: cfg.page_size_bytes,
            live: Vec::new(),
        }
    }

    /// Returns a fresh zero-initialized page-aligned allocation.
    pub fn alloc(&mut self, length: u64) -> SimResult<Allocation> {
        if length == 0 {
            return Err(SimError::ZeroLengthAlloc);
        }
        let pages = length.div_ceil(self.page_size);
        let available = (self.total_pages - self.next_page) * self.page_size;
        if pages > self.total_pages - self.next_page {
            return Err(SimError::OutOfSpace {
                requested: length,
                available,
            });
        }
        let alloc = Allocation {
            base: GlobalAddr(self.next_page * self.page_size),
            length,
        };
        self.next_page += pages;
        self.live.push(alloc);
        Ok(alloc)
    }

    pub fn live(&self) -> &[Allocation] {
        &self.live
    }
}

/// Bounds- and page-crossing validation for a load or store.
pub fn check_access(addr: GlobalAddr, len: u64, cfg: &SimConfig) -> SimResult<()> {
    if len == 0 || len > cfg.page_size_bytes {
        return Err(SimError::OutOfBounds {
            addr: addr.0,
            len,
            size: cfg.total_size_bytes,
        });
    }
    if addr.0.checked_add(len).map_or(true, |end| end > cfg.total_size_bytes) {
        return Err(SimError::OutOfBounds {
            addr: addr.0,
            len,
            size: cfg.total_size_bytes,
        });
    }
    let page_size = cfg.page_size_bytes;
    if addr.0 / page_size != (addr.0 + len - 1) / page_size {
        return Err(SimError::PageCrossing {
            addr: addr.0,
            len,
            page_size,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg() -> SimConfig {
        SimConfig {
            total_size_bytes: 64 * 4096,
            ..SimConfig::default()
        }
    }

    #[test]
    fn alloc_is_page_aligned_bump() {
        let c = cfg();
        let mut a = Allocator::new(&c);
        let first = a.alloc(100).unwrap();
        assert_eq!(first.base, GlobalAddr(0));
        assert_eq!(first.length, 100);
        let second = a.alloc(10).unwrap();
        assert_eq!(second.base, GlobalAddr(4096));
    }

    #[test]
    fn alloc_spanning_two_pages() {
        let c = cfg();
        let mut a = Allocator::new(&c);
        a.alloc(4097).unwrap();
        assert_eq!(a.alloc(1).unwrap().base, GlobalAddr(2 * 4096));
    }

    #[test]
    fn alloc_out_of_space() {
        let c = cfg();
        let mut a = Allocator::new(&c);
        let err = a.alloc(c.total_size_bytes + 1).unwrap_err();
        assert!(matches!(err, SimError::OutOfSpace { .. }));
    }

    #[test]
    fn page_of_examples() {
        let c = cfg();
        assert_eq!(page_of(GlobalAddr(0), &c).unwrap(), PageId(0));
        assert_eq!(page_of(GlobalAddr(4096), &c).unwrap(), PageId(1));
        assert_eq!(page_of(GlobalAddr(8191), &c).unwrap(), PageId(1));
        assert!(page_of(GlobalAddr(c.total_size_bytes), &c).is_err());
    }

    #[test]
    fn server_of_examples() {
        assert_eq!(server_of(PageId(7), 3), 1);
        assert_eq!(server_of(PageId(0), 5), 0);
        assert_eq!(server_of(PageId(5), 1), 0);
    }

    #[test]
    fn server_read_your_write() {
        let mut s = MemoryServer::new(0);
        let mut img = vec![0u8; 4096];
        img[10..14].copy_from_slice(&[1, 2, 3, 4]);
        s.merge(PageId(3), &img, &[(10, 4)]);
        let back = s.read(PageId(3), 4096);
        assert_eq!(&back[10..14], &[1, 2, 3, 4]);
        assert_eq!(back[9], 0);
    }

    #[test]
    fn never_written_page_reads_zero() {
        let s = MemoryServer::new(0);
        assert!(s.read(PageId(9), 4096).iter().all(|&b| b == 0));
    }

    /// Two masked writes to one page, enumerated in both delivery orders,
    /// checked against a naive per-byte replay oracle.
    #[test]
    fn interleaved_writes_last_delivered_wins_per_byte() {
        let page = PageId(0);
        let mut img_a = vec![0u8; 64];
        img_a[0..8].fill(0xaa);
        img_a[8..16].fill(0xa1);
        let write_a = (img_a, vec![(0u64, 8u64), (8, 8)]);
        let mut img_b = vec![0u8; 64];
        img_b[8..16].fill(0xbb);
        img_b[16..24].fill(0xb2);
        let write_b = (img_b, vec![(8u64, 8u64), (16, 8)]);

        for order in [[&write_a, &write_b], [&write_b, &write_a]] {
            let mut server = MemoryServer::new(0);
            let mut oracle = vec![0u8; 64];
            for (img, ranges) in order {
                server.merge(page, img, ranges);
                for &(start, len) in ranges {
                    let (s, e) = (start as usize, (start + len) as usize);
                    oracle[s..e].copy_from_slice(&img[s..e]);
                }
            }
            assert_eq!(server.read(page, 64), oracle);
        }
    }

    #[test]
    fn access_checks() {
        let c = cfg();
        assert!(check_access(GlobalAddr(4088), 8, &c).is_ok());
        assert!(matches!(
            check_access(GlobalAddr(4092), 8, &c),
            Err(SimError::PageCrossing { .. })
        ));
        assert!(matches!(
            check_access(GlobalAddr(c.total_size_bytes - 4), 8, &c),
            Err(SimError::OutOfBounds { .. })
        ));
        assert!(check_access(GlobalAddr(0), 0, &c).is_err());
    }

    proptest! {
        /// Every page maps to exactly one server and the striping covers
        /// all servers when there are at least server_count pages.
        #[test]
        fn page_partition_covers_servers(server_count in 1u64..9, pages in 1u64..200) {
            let mut seen = vec![0u64; server_count as usize];
            for p in 0..pages {
                let s = server_of(PageId(p), server_count);
                prop_assert!(s < server_count);
                seen[s as usize] += 1;
            }
            if pages >= server_count {
                prop_assert!(seen.iter().all(|&n| n > 0));
            }
            prop_assert_eq!(seen.iter().sum::<u64>(), pages);
        }

        /// Live allocations are pairwise disjoint and in bounds.
        #[test]
        fn allocations_disjoint(lens in proptest::collection::vec(1u64..20_000, 1..12)) {
            let c = cfg();
            let mut a = Allocator::new(&c);
            for len in lens {
                if a.alloc(len).is_err() {
                    break;
                }
            }
            let live = a.live();
            for (i, x) in live.iter().enumerate() {
                prop_assert!(x.base.0 + x.length <= c.total_size_bytes);
                for y in live.iter().skip(i + 1) {
                    let disjoint =
                        x.base.0 + x.length <= y.base.0 || y.base.0 + y.length <= x.base.0;
                    prop_assert!(disjoint);
                }
            }
        }
    }
}
