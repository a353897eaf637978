use adlab::assignment::{hash_user, AllocationPlan, TestSalt};
use adlab::special::chi_square_sf;

#[test]
fn salts_give_uncorrelated_buckets() {
    let plan = AllocationPlan::new(vec![("a", 0.5), ("b", 0.5)]).unwrap();
    let (s1, s2) = (TestSalt(0x1111), TestSalt(0x2222));
    let n = 10_000;
    let xs: Vec<f64> = (0..n).map(|u| plan.bucket(u, s1) as f64).collect();
    let ys: Vec<f64> = (0..n).map(|u| plan.bucket(u, s2) as f64).collect();
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let vx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let vy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let r = cov / (vx * vy).sqrt();
    // 4 standard errors of a null correlation.
    assert!(r.abs() < 4.0 / (n as f64).sqrt(), "correlation {r}");
}

#[test]
fn single_bit_flips_avalanche() {
    let salt = TestSalt(0xdead_beef);
    let mut total = 0u64;
    let mut flips = 0u64;
    for i in 0..10_000u64 {
        let id = i.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let bit = i % 64;
        total += (hash_user(id, salt) ^ hash_user(id ^ (1 << bit), salt)).count_ones() as u64;
        flips += 1;
    }
    let mean = total as f64 / flips as f64;
    assert!((28.0..=36.0).contains(&mean), "mean flipped bits {mean}");
}

#[test]
fn contingency_across_salts_is_independent() {
    let plan = AllocationPlan::new((0..5).map(|i| (format!("c{i}"), 0.2)).collect()).unwrap();
    let mut table = [[0f64; 5]; 5];
    for u in 0..100_000u64 {
        table[plan.assign(u, TestSalt(7))][plan.assign(u, TestSalt(8))] += 1.0;
    }
    let n: f64 = table.iter().flatten().sum();
    let rows: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<f64> = (0..5).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    let mut stat = 0.0;
    for i in 0..5 {
        for j in 0..5 {
            let e = rows[i] * cols[j] / n;
            stat += (table[i][j] - e).powi(2) / e;
        }
    }
    assert!(chi_square_sf(stat, 16.0) > 0.001, "chi2 {stat}");
}

#[test]
fn assignment_is_a_function_of_user_and_salt() {
    let plan = AllocationPlan::new(vec![("test", 0.8), ("control", 0.2)]).unwrap();
    for u in 0..1000 {
        let c = plan.assign(u, TestSalt(3));
        assert_eq!(c, plan.assign(u, TestSalt(3)));
        assert!(plan.bucket_range(c).contains(&plan.bucket(u, TestSalt(3))));
    }
}
