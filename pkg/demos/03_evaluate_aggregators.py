"""Compare the three test-time aggregators under strong domain shift.

Each trained domain contributes one scoring path, the global prompt adds
one more. The aggregators differ only in the path weights:

  average        uniform over paths
  uncertainty    inverse prediction entropy per path
  domain_guided  softmax over the image's similarity to each domain prompt

With a large shift, per-domain paths specialize to their own domain's
geometry, so routing a sample to the right path pays off and uniform
averaging pays a dilution penalty. That ordering is what this demo shows.
"""

from feddcg import (
    AGGREGATORS,
    RunConfig,
    TextEncoderStub,
    evaluate,
    format_results_table,
    generate_synthetic,
    init_round_state,
    make_inference_model,
    partition_clients,
    run_round,
)

store = generate_synthetic(
    num_domains=4, num_classes=10, dim=16, token_dim=16,
    images_per_class_per_domain=12, domain_shift=1.5, noise=0.35, seed=0,
)

config = RunConfig(
    rounds=200, clients_per_domain=2, classes_per_client=5, batch_size=32,
    local_epochs=1, base_lr=2.0, d_h=16, heads=2, seed=0, stub_seed=0,
    normalized_momentum=True,
)

stub = TextEncoderStub.create(config.effective_stub_seed, store.token_dim, store.dim)
partitions = partition_clients(
    store, config.clients_per_domain, config.classes_per_client,
    config.sampling_rate, config.seed,
)
state = init_round_state(store, partitions, config)
print(f"training {config.rounds} rounds on {len(partitions)} clients ...")
for _ in range(config.rounds):
    state = run_round(state, partitions, store, stub, config)

model = make_inference_model(
    state.group_nets, state.bank, stub, store.class_token_embeddings,
    tau=config.tau, tau_w=config.tau_w,
)

print()
for aggregator in AGGREGATORS:
    results = evaluate(model, store, aggregator)
    print(format_results_table(results))
    print()
