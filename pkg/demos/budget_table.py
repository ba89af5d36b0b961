"""Print the privacy ledger and stage shares for a few noise allocations."""
from feta.accountant import format_ledger_table, ledger_for
from feta.pipeline import CurriculumConfig, format_sweep_table, allocation_sweep, plan_budget

cfg = CurriculumConfig(target_eps=1.0, sigma_t=20.0, sigma_f=10.0)
plan = plan_budget(cfg)
print(f"calibrated sigma_d = {plan['sigma_d']:.4f} over t_d = {plan['t_d']} steps")
print(format_ledger_table(ledger_for(plan["specs"]), cfg.delta, plan["shares"]))
print()

cells = allocation_sweep(cfg, [20.0, 30.0, 40.0], [10.0, 26.0, 61.0], train=False)
print("budget shares in % (spatial / frequency / dpsgd) at epsilon = 1:")
print(format_sweep_table(cells))
print()
print("calibrated sigma_d per cell:")
print(format_sweep_table(cells, "sigma_d"))
