# Command-line subcommands
from app.commands import calibrate, kernel_table, plot, reconstruct, simulate

COMMANDS = {
    "simulate": simulate,
    "reconstruct": reconstruct,
    "calibrate": calibrate,
    "kernel-table": kernel_table,
    "plot": plot,
}
