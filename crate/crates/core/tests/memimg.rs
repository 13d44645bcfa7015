mod support;

use detspace::memimg::{merge, MemoryImage, PAGE_SIZE};
use proptest::prelude::*;
use support::{build, deep_copy, merge_case, merge_oracle, region, BASE, LEN};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn merge_matches_oracle(case in merge_case()) {
        let mut b = build(&case);
        let want = merge_oracle(b.snap.image(), &b.child, &b.parent);
        let report = merge(&mut b.parent, BASE, &b.child, &b.snap, BASE, LEN).unwrap();
        prop_assert_eq!(region(&b.parent), want.bytes);
        prop_assert_eq!(report.bytes_copied, want.copied);
        let mut got = report.conflicts.clone();
        got.sort();
        prop_assert_eq!(got, want.conflicts);
    }

    #[test]
    fn second_merge_changes_nothing(case in merge_case()) {
        let mut b = build(&case);
        let first = merge(&mut b.parent, BASE, &b.child, &b.snap, BASE, LEN).unwrap();
        let after = region(&b.parent);
        let second = merge(&mut b.parent, BASE, &b.child, &b.snap, BASE, LEN).unwrap();
        prop_assert_eq!(region(&b.parent), after);
        prop_assert_eq!(second.bytes_copied, 0);
        // Bytes copied the first time now differ from the snapshot on both
        // sides, so they join the conflict set; nothing else changes.
        let firsts: Vec<u32> = first.conflicts.iter().map(|c| c.addr).collect();
        let extra = second.conflicts.iter().filter(|c| !firsts.contains(&c.addr)).count() as u64;
        prop_assert!(firsts.iter().all(|a| second.conflicts.iter().any(|c| c.addr == *a)));
        prop_assert_eq!(extra, first.bytes_copied);
    }

    #[test]
    fn equal_new_values_still_conflict(case in merge_case(), off in 0u16..LEN as u16, v in 10u8..20) {
        let mut b = build(&case);
        let addr = BASE + off as u32;
        for m in [&mut b.child, &mut b.parent] {
            if m.peek_byte(addr).is_none() {
                m.zero_range(addr & !(PAGE_SIZE as u32 - 1), PAGE_SIZE as u64).unwrap();
            }
            m.write(addr, &[v]).unwrap();
        }
        let report = merge(&mut b.parent, BASE, &b.child, &b.snap, BASE, LEN).unwrap();
        prop_assert!(report.conflicts.iter().any(|c| c.addr == addr && c.parent == v && c.child == v));
    }

    #[test]
    fn page_skipping_is_invisible(case in merge_case()) {
        let mut shared = build(&case);
        let mut scanned = build(&case);
        let child = deep_copy(&scanned.child);
        let a = merge(&mut shared.parent, BASE, &shared.child, &shared.snap, BASE, LEN).unwrap();
        let b = merge(&mut scanned.parent, BASE, &child, &scanned.snap, BASE, LEN).unwrap();
        prop_assert_eq!(region(&shared.parent), region(&scanned.parent));
        prop_assert_eq!(a, b);
    }

    #[test]
    fn copies_are_isolated(fill in prop::collection::vec(any::<u8>(), PAGE_SIZE * 2), writes in prop::collection::vec((0u32..2 * PAGE_SIZE as u32, any::<u8>()), 1..50)) {
        let mut a = MemoryImage::new();
        a.load(BASE, &fill).unwrap();
        let mut b = MemoryImage::new();
        b.copy_from(&a, BASE, BASE, 2 * PAGE_SIZE as u64).unwrap();
        let snap = a.snapshot();
        for (o, v) in writes {
            a.write(BASE + o, &[v]).unwrap();
        }
        let mut got = vec![0; fill.len()];
        b.read(BASE, &mut got).unwrap();
        prop_assert_eq!(&got, &fill);
        snap.image().read(BASE, &mut got).unwrap();
        prop_assert_eq!(got, fill);
    }
}
