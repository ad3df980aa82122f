#!/usr/bin/env node
/**
 * Command-line entry point for the external worker adapter.
 */
import * as os from "node:os";
import * as path from "node:path";
import { mkdtemp } from "node:fs/promises";
import { parseArgs } from "node:util";

import { AdapterError, ManagerAddress, runAdapter, validateTemplate } from "./adapter.js";

const USAGE = `usage: twostep-external-adapter --manager HOST:PORT --cmd TEMPLATE [options]

Serve trials from a manager by running TEMPLATE once per assignment.

The template is run through the shell and must reference both
  {assignment}   path to the trial's assignment JSON file
  {result}       path where the command must write its result JSON
and may reference {trial_id}. The result file must hold min_val_mse,
epochs_run and param_count; best_epoch is optional and defaults to
epochs_run.

options:
  --manager HOST:PORT  manager address (required)
  --cmd TEMPLATE       shell command template (required)
  --worker-id ID       worker name (default external-<pid>)
  --workdir DIR        where assignment/result files go (default: temp dir)
  --timeout S          kill the command after S seconds
                       (default: each assignment's own timeout)
  --heartbeat S        liveness ping cadence while a command runs (default 10)
  --help               show this text
`;

export function parseManagerAddress(text: string): ManagerAddress {
  const cut = text.lastIndexOf(":");
  if (cut <= 0 || cut === text.length - 1) {
    throw new AdapterError(`manager address must be HOST:PORT, got '${text}'`);
  }
  const port = Number(text.slice(cut + 1));
  if (!Number.isInteger(port) || port < 1 || port > 65535) {
    throw new AdapterError(`invalid port in manager address '${text}'`);
  }
  return { host: text.slice(0, cut), port };
}

async function main(argv: string[]): Promise<number> {
  let parsed;
  try {
    parsed = parseArgs({
      args: argv,
      options: {
        manager: { type: "string" },
        cmd: { type: "string" },
        "worker-id": { type: "string" },
        workdir: { type: "string" },
        timeout: { type: "string" },
        heartbeat: { type: "string" },
        help: { type: "boolean" },
      },
      allowPositionals: false,
    });
  } catch (error) {
    console.error(error instanceof Error ? error.message : String(error));
    console.error(USAGE);
    return 2;
  }
  const opts = parsed.values;
  if (opts.help) {
    console.log(USAGE);
    return 0;
  }
  if (!opts.manager || !opts.cmd) {
    console.error("--manager and --cmd are required");
    console.error(USAGE);
    return 2;
  }

  let manager: ManagerAddress;
  try {
    manager = parseManagerAddress(opts.manager);
    validateTemplate(opts.cmd);
  } catch (error) {
    console.error(error instanceof AdapterError ? error.message : String(error));
    return 2;
  }
  const timeoutSeconds = opts.timeout === undefined ? undefined : Number(opts.timeout);
  if (timeoutSeconds !== undefined && !(timeoutSeconds > 0)) {
    console.error(`--timeout must be a positive number, got '${opts.timeout}'`);
    return 2;
  }
  const heartbeatSeconds = opts.heartbeat === undefined ? 10 : Number(opts.heartbeat);
  if (!(heartbeatSeconds > 0)) {
    console.error(`--heartbeat must be a positive number, got '${opts.heartbeat}'`);
    return 2;
  }

  const workdir =
    opts.workdir ?? (await mkdtemp(path.join(os.tmpdir(), "twostep-adapter-")));
  try {
    return await runAdapter({
      manager,
      workerId: opts["worker-id"] ?? `external-${process.pid}`,
      cmdTemplate: opts.cmd,
      workdir,
      timeoutSeconds,
      heartbeatSeconds,
    });
  } catch (error) {
    const code = (error as NodeJS.ErrnoException)?.code;
    if (code === "ECONNREFUSED" || code === "ENOTFOUND" || code === "EHOSTUNREACH") {
      console.error(`cannot reach manager at ${opts.manager}: ${code}`);
      return 7;
    }
    throw error;
  }
}

main(process.argv.slice(2)).then(
  (code) => {
    process.exitCode = code;
  },
  (error) => {
    console.error(error instanceof Error ? (error.stack ?? error.message) : String(error));
    process.exitCode = 1;
  },
);
