use std::collections::HashSet;

use less_core::math;
use less_core::synthdata::*;
use rand::Rng;

#[test]
fn sort_skill_matches_sort_oracle() {
    let mut rng = math::rng(1);
    for alphabet in [Alphabet::A, Alphabet::B] {
        for _ in 0..200 {
            let len = rng.random_range(1..13);
            let prompt: Vec<u32> = (0..len)
                .map(|_| alphabet.base() + rng.random_range(0..16))
                .collect();
            let mut want = prompt.clone();
            want.sort();
            assert_eq!(Skill::SortAsc.apply(alphabet, &prompt), want);
        }
    }
}

#[test]
fn every_completion_is_labelled_correctly() {
    let pool = generate_pool(&PoolConfig::uniform(50, 3)).unwrap();
    assert_eq!(pool.len(), 500);
    assert!(pool.iter().all(check_label));
    assert!(pool.iter().enumerate().all(|(i, e)| e.id == i as u64));
}

#[test]
fn length_coverage() {
    let pool = generate_pool(&PoolConfig::uniform(4 * 11, 8)).unwrap();
    for task in Task::all() {
        let lens: HashSet<usize> = pool
            .iter()
            .filter(|e| e.subtask == Some(task.label()))
            .map(|e| e.completion.len())
            .collect();
        assert_eq!(lens, (2..=12).collect());
    }
}

#[test]
fn val_and_test_ids_never_collide_with_pool() {
    let pool = generate_pool(&PoolConfig::uniform(200, 1)).unwrap();
    let tasks: Vec<Task> = Task::all().collect();
    let val = generate_val(&tasks, 5, 1, 2, 12).unwrap();
    let test = generate_test(&tasks, 20, 1, 2, 12).unwrap();
    let pool_ids: HashSet<u64> = pool.iter().map(|e| e.id).collect();
    let val_ids: HashSet<u64> = val.iter().flatten().map(|e| e.id).collect();
    let test_ids: HashSet<u64> = test.iter().flatten().map(|e| e.id).collect();
    assert_eq!(val_ids.len(), 50);
    assert!(pool_ids.is_disjoint(&val_ids));
    assert!(pool_ids.is_disjoint(&test_ids));
    assert!(val_ids.is_disjoint(&test_ids));
}

#[test]
fn surface_form_confound_present() {
    let pool = generate_pool(&PoolConfig::uniform(10, 2)).unwrap();
    let labels: HashSet<u32> = pool.iter().filter_map(|e| e.subtask).collect();
    for skill in Skill::ALL {
        let target = Task::new(skill, Alphabet::B);
        assert!(labels.contains(&Task::new(skill, Alphabet::A).label()));
        assert!(Skill::ALL
            .iter()
            .filter(|&&s| s != skill)
            .any(|&s| labels.contains(&Task::new(s, Alphabet::B).label())));
        assert!(labels.contains(&target.label()));
    }
}

#[test]
fn regeneration_is_bit_identical() {
    let a = generate_pool(&PoolConfig::uniform(30, 5)).unwrap();
    let b = generate_pool(&PoolConfig::uniform(30, 5)).unwrap();
    assert_eq!(a, b);
    let tasks = [Task::new(Skill::ConstMap, Alphabet::B)];
    assert_eq!(
        generate_val(&tasks, 3, 4, 2, 12).unwrap(),
        generate_val(&tasks, 3, 4, 2, 12).unwrap()
    );
}
