use std::path::{Path, PathBuf};

use tastecf_core::data::{
    build_matrix, detect_delimiter, format_interactions, parse_interactions, recency_filter,
    temporal_split, FeedbackMatrix, FormatConfig, InteractionRecord, RecencyWindow, SplitSpec,
};
use tastecf_core::inference::{batch_posteriors, AbsentPolicy, Evidence};
use tastecf_core::learn::{learn_hierarchy, LearnConfig};
use tastecf_core::ltm::LatentTreeModel;
use tastecf_core::metrics::{
    evaluate_user, popularity_scores, user_knn_scores, EvalProtocol, EvalReport, UserEval,
};
use tastecf_core::recommend::{
    group_preferences, score_items, top_n, user_membership, GroupProfile, MembershipVector,
};
use tastecf_core::synth::{format_truth, generate, SynthConfig};
use tastecf_core::text;

use crate::io_util::{read_file, usage, CliError, StagedOutputs};
use crate::opts::{
    ColumnArgs, Command, EvaluateArgs, InspectArgs, RecommendArgs, SplitArgs, SynthArgs, TrainArgs,
};

pub fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Split(args) => cmd_split(args),
        Command::Train(args) => cmd_train(args),
        Command::Inspect(args) => cmd_inspect(args),
        Command::Recommend(args) => cmd_recommend(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Synth(args) => cmd_synth(args),
    }
}

fn format_config(columns: &ColumnArgs) -> FormatConfig {
    FormatConfig {
        user_column: columns.user_col.clone(),
        item_column: columns.item_col.clone(),
        time_column: columns.time_col.clone(),
    }
}

fn load_interactions(
    path: &Path,
    columns: &ColumnArgs,
) -> Result<(Vec<InteractionRecord>, char), CliError> {
    let content = read_file(path)?;
    let delimiter = detect_delimiter(&content);
    let records =
        parse_interactions(&content, &format_config(columns)).map_err(|e| CliError::Data {
            source: e,
            path: path.to_path_buf(),
        })?;
    Ok((records, delimiter))
}

/// Loads and validates a model file; invalid models are rejected with the
/// first violation.
fn load_model(path: &Path) -> Result<LatentTreeModel, CliError> {
    let content = read_file(path)?;
    let model = LatentTreeModel::deserialize(&content).map_err(|e| CliError::Model {
        source: e,
        path: path.to_path_buf(),
    })?;
    let violations = model.validate();
    if let Some(first) = violations.first() {
        return Err(usage(format!(
            "{}: invalid model ({} violations; first: {first})",
            path.display(),
            violations.len()
        )));
    }
    Ok(model)
}

fn parse_ratios(text: &str) -> Result<SplitSpec, CliError> {
    let parts: Vec<&str> = text.split(',').collect();
    let [train, valid, test] = parts.as_slice() else {
        return Err(usage(format!(
            "--ratios needs three comma-separated fractions, got '{text}'"
        )));
    };
    let parse = |s: &str| -> Result<f64, CliError> {
        s.trim()
            .parse()
            .map_err(|_| usage(format!("bad fraction '{s}' in --ratios")))
    };
    SplitSpec::new(parse(train)?, parse(valid)?, parse(test)?)
        .map_err(|e| usage(format!("--ratios: {e}")))
}

fn parse_window(text: &str) -> Result<RecencyWindow, CliError> {
    if text.eq_ignore_ascii_case("none") {
        return Ok(RecencyWindow::Unbounded);
    }
    let seconds: i64 = text.parse().map_err(|_| {
        usage(format!(
            "--window must be a number of seconds or 'none', got '{text}'"
        ))
    })?;
    if seconds <= 0 {
        return Err(usage(format!("--window must be positive, got {seconds}")));
    }
    Ok(RecencyWindow::Seconds(seconds))
}

fn parse_cutoffs(text: &str) -> Result<Vec<usize>, CliError> {
    let cutoffs: Result<Vec<usize>, _> = text.split(',').map(|s| s.trim().parse()).collect();
    let cutoffs = cutoffs.map_err(|_| usage(format!("bad --cutoffs list '{text}'")))?;
    if cutoffs.is_empty() || cutoffs.contains(&0) {
        return Err(usage("--cutoffs must be positive integers".to_string()));
    }
    Ok(cutoffs)
}

/// Maps `f` over the ids on up to `threads` workers, preserving id order.
fn par_map<T, F>(ids: &[u32], threads: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u32) -> T + Sync,
{
    if threads <= 1 || ids.len() <= 1 {
        return ids.iter().map(|&u| f(u)).collect();
    }
    let chunk = ids.len().div_ceil(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = ids
            .chunks(chunk)
            .map(|part| scope.spawn(|| part.iter().map(|&u| f(u)).collect::<Vec<T>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

fn cmd_split(args: SplitArgs) -> Result<(), CliError> {
    let (records, delimiter) = load_interactions(&args.input, &args.columns)?;
    let spec = parse_ratios(&args.ratios)?;
    let (train, valid, test) = temporal_split(records, &spec).map_err(|e| CliError::Data {
        source: e,
        path: args.input.clone(),
    })?;

    let config = format_config(&args.columns);
    let mut outputs = StagedOutputs::new();
    let mut paths = Vec::new();
    for (part, name) in [(&train, "train"), (&valid, "valid"), (&test, "test")] {
        let mut path = args.output.as_os_str().to_owned();
        path.push(".");
        path.push(name);
        let path = PathBuf::from(path);
        outputs.write(&path, &format_interactions(part, &config, delimiter))?;
        paths.push((path, part.len()));
    }
    outputs.commit()?;
    for (path, len) in paths {
        println!("{}: {len} records", path.display());
    }
    Ok(())
}

fn learn_config(args: &TrainArgs) -> LearnConfig {
    LearnConfig {
        max_island_size: args.max_island_size,
        em_max_iters: args.em_iters,
        em_tol: args.em_tol,
        em_restarts: args.em_restarts,
        rng_seed: args.seed,
        min_top_level_vars: args.min_top_vars,
    }
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let (records, _) = load_interactions(&args.input, &args.columns)?;
    let (matrix, _) = build_matrix(&records, None);
    let (model, report) = learn_hierarchy(&matrix, &learn_config(&args))?;

    let mut outputs = StagedOutputs::new();
    outputs.write(&args.output, &model.serialize())?;
    let report_text = report.render();
    if let Some(report_path) = &args.report {
        outputs.write(report_path, &report_text)?;
    }
    outputs.commit()?;

    if args.report.is_none() {
        print!("{report_text}");
    }
    println!(
        "model: {} ({} nodes, {} levels) -> {}",
        if report.chain_join.is_empty() {
            "single-root hierarchy"
        } else {
            "chain-joined hierarchy"
        },
        model.num_nodes(),
        model.max_level(),
        args.output.display()
    );
    Ok(())
}

fn cmd_inspect(args: InspectArgs) -> Result<(), CliError> {
    let model = load_model(&args.model)?;
    let group_ids = model
        .latents_at_level(args.level)
        .map_err(|e| CliError::Model {
            source: e,
            path: args.model.clone(),
        })?;

    let mut out = String::new();
    match &args.train {
        Some(train_path) => {
            let (records, _) = load_interactions(train_path, &args.columns)?;
            let (matrix, _) = build_matrix(&records, None);
            let batch = batch_posteriors(&model, &matrix, args.level, AbsentPolicy::AsS0)?;
            report_unmatched(batch.unmatched_model_leaves, batch.unmatched_items);
            let profile = group_preferences(&model, &matrix, &batch.memberships, args.level)?;
            for (g, id) in group_ids.iter().enumerate() {
                let mass = profile.membership_mass()[g];
                out.push_str(&format!(
                    "group {} (level {}, mass {:.3}{})\n",
                    model.node(*id).label,
                    args.level,
                    mass,
                    if profile.degenerate_groups().contains(&g) {
                        ", degenerate"
                    } else {
                        ""
                    }
                ));
                let ranked = top_n(profile.preferences(g), &[], args.top_n);
                for &item in &ranked.ranking {
                    out.push_str(&format!(
                        "  {} {}\n",
                        text::format_sig9(profile.preference(g, item as usize)),
                        profile.item_keys()[item as usize]
                    ));
                }
            }
        }
        None => {
            let children = model.child_lists();
            for id in &group_ids {
                let mut leaves = Vec::new();
                let mut stack = vec![*id];
                while let Some(v) = stack.pop() {
                    if children[v.index()].is_empty() {
                        leaves.push(model.node(v).label.clone());
                    } else {
                        stack.extend(children[v.index()].iter().copied());
                    }
                }
                leaves.sort();
                out.push_str(&format!(
                    "group {} (level {}, {} items)\n",
                    model.node(*id).label,
                    args.level,
                    leaves.len()
                ));
                for leaf in leaves.iter().take(args.top_n) {
                    out.push_str(&format!("  {leaf}\n"));
                }
                if leaves.len() > args.top_n {
                    out.push_str(&format!("  ... {} more\n", leaves.len() - args.top_n));
                }
            }
        }
    }

    match &args.output {
        Some(path) => {
            let mut outputs = StagedOutputs::new();
            outputs.write(path, &out)?;
            outputs.commit()?;
        }
        None => print!("{out}"),
    }
    Ok(())
}

fn report_unmatched(model_leaves: usize, items: usize) {
    if model_leaves > 0 || items > 0 {
        eprintln!(
            "note: {model_leaves} model items missing from the data, {items} data items missing from the model"
        );
    }
}

/// Memberships from full training evidence, plus the profile over the
/// (possibly recency-windowed) history view.
fn memberships_and_profile(
    model: &LatentTreeModel,
    train_records: &[InteractionRecord],
    train: &FeedbackMatrix,
    level: u32,
    window: RecencyWindow,
) -> Result<(Vec<MembershipVector>, GroupProfile), CliError> {
    let batch = batch_posteriors(model, train, level, AbsentPolicy::AsS0)?;
    report_unmatched(batch.unmatched_model_leaves, batch.unmatched_items);

    let history = match window {
        RecencyWindow::Unbounded => train.clone(),
        RecencyWindow::Seconds(_) => {
            let reference = train_records.iter().map(|r| r.timestamp).max().unwrap_or(0);
            let kept = recency_filter(train_records, window, reference);
            let (history, drops) = build_matrix(&kept, Some(train));
            debug_assert_eq!(drops.total(), 0);
            history
        }
    };
    let profile = group_preferences(model, &history, &batch.memberships, level)?;
    Ok((batch.memberships, profile))
}

fn cmd_recommend(args: RecommendArgs) -> Result<(), CliError> {
    let model = load_model(&args.model)?;
    let (train_records, _) = load_interactions(&args.train, &args.columns)?;
    let (train, _) = build_matrix(&train_records, None);
    let window = parse_window(&args.window)?;
    let (memberships, profile) =
        memberships_and_profile(&model, &train_records, &train, args.level, window)?;

    // requested users: known ones carry their training row, unknown ones are
    // cold starts served from prior memberships
    enum Target {
        Known(u32),
        Cold(String, MembershipVector),
    }
    let targets: Vec<Target> = match &args.users {
        None => (0..train.num_users() as u32).map(Target::Known).collect(),
        Some(list) => list
            .split(',')
            .map(|key| {
                let key = key.trim();
                match train.user_id(key) {
                    Some(u) => Ok(Target::Known(u)),
                    None => {
                        eprintln!("note: cold-start user '{key}' (not in training data)");
                        let prior = user_membership(
                            &model,
                            &Evidence::new(AbsentPolicy::AsMissing),
                            args.level,
                        )?;
                        Ok(Target::Cold(key.to_string(), prior))
                    }
                }
            })
            .collect::<Result<_, CliError>>()?,
    };

    let known_ids: Vec<u32> = targets
        .iter()
        .filter_map(|t| match t {
            Target::Known(u) => Some(*u),
            Target::Cold(..) => None,
        })
        .collect();
    let known_rankings = par_map(&known_ids, args.threads, |u| {
        let scores = score_items(&profile, &memberships[u as usize]).expect("dimensions agree");
        top_n(&scores, train.row(u), args.top_n)
    });

    let mut out = String::from(text::recommendation_header());
    let mut known_iter = known_ids.iter().zip(known_rankings);
    for target in &targets {
        match target {
            Target::Known(_) => {
                let (&u, ranked) = known_iter.next().expect("one ranking per known target");
                text::render_recommendation_rows(
                    &mut out,
                    train.user_key(u),
                    profile.item_keys(),
                    &ranked,
                    false,
                );
            }
            Target::Cold(key, prior) => {
                let scores = score_items(&profile, prior)?;
                let ranked = top_n(&scores, &[], args.top_n);
                text::render_recommendation_rows(&mut out, key, profile.item_keys(), &ranked, true);
            }
        }
    }

    let mut outputs = StagedOutputs::new();
    outputs.write(&args.output, &out)?;
    if let Some(path) = &args.memberships_out {
        outputs.write(
            path,
            &text::render_memberships(train.user_keys(), profile.group_labels(), &memberships),
        )?;
    }
    if let Some(path) = &args.profile_out {
        outputs.write(path, &text::render_group_profile(&profile))?;
    }
    outputs.commit()?;
    println!(
        "wrote recommendations for {} users -> {}",
        targets.len(),
        args.output.display()
    );
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<(), CliError> {
    let model = load_model(&args.model)?;
    let (train_records, _) = load_interactions(&args.train, &args.columns)?;
    let (train, _) = build_matrix(&train_records, None);
    let (test_records, _) = load_interactions(&args.test, &args.columns)?;
    let (test, drops) = build_matrix(&test_records, Some(&train));
    if drops.total() > 0 {
        eprintln!(
            "note: dropped {} test events with unknown users and {} with unknown items",
            drops.unknown_user, drops.unknown_item
        );
    }
    let cutoffs = parse_cutoffs(&args.cutoffs)?;
    let window = parse_window(&args.window)?;
    let (memberships, profile) =
        memberships_and_profile(&model, &train_records, &train, args.level, window)?;
    let protocol = EvalProtocol::new(&train, &test, cutoffs.clone())?;

    let users: Vec<u32> = (0..train.num_users() as u32).collect();
    let run = |scorer: &(dyn Fn(u32) -> Vec<f64> + Sync)| -> Result<EvalReport, CliError> {
        let results: Vec<(u32, Option<UserEval>)> = par_map(&users, args.threads, |u| {
            (u, evaluate_user(&protocol, u, &scorer(u)))
        });
        Ok(EvalReport::aggregate(cutoffs.clone(), results)?)
    };

    let mut out = String::new();
    let taste_report =
        run(&|u: u32| score_items(&profile, &memberships[u as usize]).expect("dimensions agree"))?;
    out.push_str(&taste_report.render("taste-groups"));

    for baseline in &args.baselines {
        match baseline.as_str() {
            "popularity" => {
                let scores = popularity_scores(&train);
                out.push('\n');
                out.push_str(&run(&|_| scores.clone())?.render("popularity"));
            }
            "user-knn" => {
                let k = args.knn_k;
                out.push('\n');
                out.push_str(&run(&|u| user_knn_scores(&train, k, u))?.render("user-knn"));
            }
            other => {
                return Err(usage(format!(
                    "unknown baseline '{other}' (expected popularity or user-knn)"
                )))
            }
        }
    }

    match &args.output {
        Some(path) => {
            let mut outputs = StagedOutputs::new();
            outputs.write(path, &out)?;
            outputs.commit()?;
        }
        None => print!("{out}"),
    }
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<(), CliError> {
    let config = SynthConfig {
        num_users: args.users,
        num_items: args.items,
        num_tastes: args.tastes,
        items_per_taste: args.items_per_taste,
        taste_prob: args.taste_prob,
        consume_prob_in: args.consume_prob_in,
        consume_prob_out: args.consume_prob_out,
        rng_seed: args.seed,
    };
    let (records, truth) = generate(&config)?;

    let mut outputs = StagedOutputs::new();
    outputs.write(
        &args.output,
        &format_interactions(&records, &FormatConfig::default(), ','),
    )?;
    outputs.write(&args.truth, &format_truth(&truth))?;
    outputs.commit()?;
    println!(
        "generated {} events for {} users x {} items -> {}",
        records.len(),
        args.users,
        args.items,
        args.output.display()
    );
    Ok(())
}
