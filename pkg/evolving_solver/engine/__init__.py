"""
Solver engine, one module per concern:

- dsl_env: stack-machine DSL, interpreter, reward, task generator
- vocab / policy_net: tokenizer tables and the base policy network
- adapter_engine / snapshot: transient adapter lifecycle and weight containers
- grpo: group-relative advantages, clipped loss, internalization
- search: PUCT thought tree
- evolution_loop: per-task solve loop, baselines, budget model, replay
- corpus_pretrain: corpus generation and base-model pretraining
"""
