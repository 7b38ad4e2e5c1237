# Headless Ghidra post-script that writes a blockpair dump.
#
#   analyzeHeadless /tmp/proj p -import ./prog-O0 \
#       -postScript ghidra_export.py out=prog-O0.dump.json isa=x86_64 \
#       compiler=gcc opt=O0 program=prog
#
# Runs under Ghidra's Jython (Python 2.7).
# @category Export

import json

from ghidra.program.model.block import BasicBlockModel


def script_args():
    out = {}
    for a in getScriptArgs():
        k, _, v = a.partition("=")
        out[k] = v
    return out


def hx(addr):
    return "0x%x" % addr.getOffset()


def is_string_ref(ins, op_index):
    listing = currentProgram.getListing()
    for ref in ins.getOperandReferences(op_index):
        data = listing.getDataAt(ref.getToAddress())
        if data is not None and data.hasStringValue():
            return True
    return False


def export_instruction(ins):
    operands = []
    strings = []
    for i in range(ins.getNumOperands()):
        operands.append(ins.getDefaultOperandRepresentation(i))
        if is_string_ref(ins, i):
            strings.append(i)
    rec = {
        "addr": hx(ins.getAddress()),
        "mnemonic": ins.getMnemonicString(),
        "operands": operands,
        "raw": str(ins),
    }
    if strings:
        rec["string_operands"] = strings
    return rec


def export_function(fn, model):
    listing = currentProgram.getListing()
    blocks = []
    it = model.getCodeBlocksContaining(fn.getBody(), monitor)
    while it.hasNext():
        cb = it.next()
        ins = [export_instruction(i) for i in listing.getInstructions(cb, True)]
        if ins:
            blocks.append({"start": hx(cb.getFirstStartAddress()), "instructions": ins})
    blocks.sort(key=lambda b: int(b["start"], 16))
    return {
        "name": fn.getName(),
        "entry": hx(fn.getEntryPoint()),
        "external": fn.isExternal(),
        "library": fn.isThunk(),
        "blocks": blocks,
    }


def main():
    args = script_args()
    model = BasicBlockModel(currentProgram)
    functions = []
    library = set()
    fm = currentProgram.getFunctionManager()
    for fn in fm.getFunctions(True):
        if fn.isThunk() or fn.isExternal():
            library.add(fn.getName())
            functions.append({"name": fn.getName(), "entry": hx(fn.getEntryPoint()),
                              "external": True, "library": True, "blocks": []})
            continue
        functions.append(export_function(fn, model))
    for fn in fm.getExternalFunctions():
        library.add(fn.getName())
    dump = {
        "config": {
            "isa": args.get("isa", ""),
            "compiler": args.get("compiler", ""),
            "opt_level": args.get("opt", ""),
            "program": args.get("program", currentProgram.getName()),
            "binary_path": currentProgram.getExecutablePath(),
        },
        "library_functions": sorted(library),
        "functions": functions,
    }
    with open(args["out"], "w") as f:
        json.dump(dump, f, indent=1)


main()
