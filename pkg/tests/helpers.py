"""Small synthetic networks used across test modules."""

from opfproxy.grid import Branch, Bus, Generator, GridModel, Load


def two_bus(x=0.1, r=0.0, p_load=0.5, q_load=0.0, b_charging=0.0,
            i_max=100.0, v_span=(0.9, 1.1)):
    """Slack generator at bus 1, single line to a load at bus 2."""
    lo, hi = v_span
    loads = (Load(bus_id=2, p_nominal=p_load, q_nominal=q_load),) \
        if p_load or q_load else ()
    return GridModel(
        buses=(Bus(id=1, v_min=lo, v_max=hi, is_slack=True),
               Bus(id=2, v_min=lo, v_max=hi)),
        generators=(Generator(bus_id=1, p_min=0.0, p_max=10.0,
                              q_min=-10.0, q_max=10.0,
                              cost_coeff=10.0, v_setpoint=1.0),),
        branches=(Branch(from_bus=1, to_bus=2, r=r, x=x,
                         b_charging=b_charging, i_max=i_max),),
        loads=loads,
        base_mva=100.0,
    )


def three_bus_chain():
    """Unloaded lossless chain 1-2-3 with a slack generator at bus 1."""
    return GridModel(
        buses=(Bus(id=1, v_min=0.9, v_max=1.1, is_slack=True),
               Bus(id=2, v_min=0.9, v_max=1.1),
               Bus(id=3, v_min=0.9, v_max=1.1)),
        generators=(Generator(bus_id=1, p_min=0.0, p_max=10.0,
                              q_min=-10.0, q_max=10.0,
                              cost_coeff=5.0, v_setpoint=1.0),),
        branches=(Branch(from_bus=1, to_bus=2, r=0.0, x=0.2, i_max=100.0),
                  Branch(from_bus=2, to_bus=3, r=0.0, x=0.4, i_max=100.0)),
        loads=(),
        base_mva=100.0,
    )
